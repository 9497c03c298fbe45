//! Deterministic randomness, keyed by `(seed, stream)`.
//!
//! Every random decision in the crate draws from a ChaCha generator opened
//! at an explicit `(seed, stream)` address. Streams never share state, so
//! reordering or parallelizing work that uses different streams cannot
//! change any sampled value.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Stream addresses. Keeping them in one place avoids accidental collisions.
pub mod stream {
    pub const CLASS_MEANS: u64 = 0;
    pub const ROTATION: u64 = 1;
    pub const TRAIN_NOISE: u64 = 2;
    pub const EVAL_NOISE: u64 = 3;
    pub const BASE_INIT: u64 = 10;
    pub const ADAPTER_INIT: u64 = 11;
    pub const DROPOUT: u64 = 12;
    /// Shuffle stream for epoch `e` is `SHUFFLE_BASE + e`.
    pub const SHUFFLE_BASE: u64 = 1 << 32;
}

/// Opens the generator addressed by `(seed, stream)`.
pub fn open(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
