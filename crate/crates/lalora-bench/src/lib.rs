//! Shared fixtures for the benchmark suite: an adapted network at the
//! reference dimensions, a synthetic task, and fitted posteriors.

use lalora_core::curvature::{fit_curvature, CurvatureKind, LaplaceConfig};
use lalora_core::linalg::Matrix;
use lalora_core::model::{attach_lora, init_network, Network};
use lalora_core::posterior::LaplacePosterior;
use lalora_core::tasks::{generate_task, LabeledDataset, Task, TaskSpec};

pub const DIMS: [usize; 3] = [20, 64, 64];
pub const CLASSES: usize = 10;
pub const RANK: usize = 4;
pub const ALPHA: f64 = 8.0;

pub fn task() -> Task {
    generate_task(&TaskSpec {
        seed: 1,
        dim: DIMS[0],
        classes: CLASSES,
        samples: 2000,
        eval_samples: 200,
        noise_scale: 1.0,
        rotation_seed: None,
    })
    .expect("task generates")
}

pub fn adapted_network() -> Network {
    let mut net = init_network(&DIMS, CLASSES, 11).expect("network initializes");
    attach_lora(&mut net, &[0, 1, 2], RANK, ALPHA, 0.0, 101).expect("adapters attach");
    net
}

/// A deterministic nudge off the attach point, so penalties and their
/// gradients are nonzero.
pub fn nudged(net: &Network) -> Network {
    let mut moved = net.clone();
    for (ai, ad) in moved.adapters_mut().into_iter().enumerate() {
        let base = ai as f64 * 1.9;
        let old_a = ad.a.clone();
        ad.a = Matrix::from_fn(old_a.rows(), old_a.cols(), |i, j| {
            old_a.get(i, j) + 0.02 * (base + 1.3 * i as f64 + 2.1 * j as f64).sin()
        });
        let old_b = ad.b.clone();
        ad.b = Matrix::from_fn(old_b.rows(), old_b.cols(), |i, j| {
            old_b.get(i, j) + 0.02 * (base + 0.9 + 1.7 * i as f64 + 1.1 * j as f64).cos()
        });
    }
    moved
}

pub fn laplace(kind: CurvatureKind) -> LaplaceConfig {
    LaplaceConfig {
        kind,
        batches_per_subdataset: 4,
        batch_size: 128,
        per_example: false,
        seed: 77,
    }
}

pub fn posterior(net: &Network, data: &LabeledDataset, kind: CurvatureKind) -> LaplacePosterior {
    let est = fit_curvature(net, &[data], &laplace(kind)).expect("curvature fits");
    LaplacePosterior::from_estimate(net, &est).expect("posterior builds")
}
