//! Laplace-regularized low-rank adaptation at desk scale.
//!
//! The crate fits curvature approximations (diagonal empirical Fisher,
//! block Kronecker-factored, block tri-diagonal Kronecker-factored) over
//! low-rank adapter weights on source tasks, then uses the resulting
//! quadratic penalty to fine-tune on a target task without forgetting the
//! sources. Every piece is small enough to be checked against dense
//! oracles.

pub mod checkpoint;
pub mod config;
pub mod curvature;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod posterior;
pub mod rng;
pub mod tasks;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use linalg::{Matrix, Vector};
