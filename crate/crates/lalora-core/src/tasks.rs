//! Synthetic classification tasks for forgetting experiments.
//!
//! A task is a Gaussian-mixture classification problem: class means drawn
//! from a unit Gaussian, samples drawn around them, optionally pushed
//! through a seeded orthogonal rotation. All randomness is addressed by
//! `(seed, stream)` so regeneration is byte-identical no matter how calls
//! are ordered or parallelized.

use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, Matrix};
use crate::rng::{self, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

/// Recipe for one task. Equal specs always produce byte-identical data.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    /// Training rows.
    pub samples: usize,
    /// Held-out rows drawn around the same class means.
    pub eval_samples: usize,
    pub noise_scale: f64,
    /// When set, inputs are multiplied by a seeded orthogonal matrix.
    pub rotation_seed: Option<u64>,
}

impl TaskSpec {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::validation("task dim must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::validation(format!(
                "task needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.samples < self.classes {
            return Err(Error::validation(format!(
                "{} samples cannot cover {} classes",
                self.samples, self.classes
            )));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(Error::validation(format!(
                "noise_scale must be finite and >= 0, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Inputs are `n x dim`, one row per sample; labels are class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Concatenates datasets row-wise; dims must agree.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
        let dim = match parts.first() {
            Some(p) => p.dim(),
            None => return Err(Error::validation("concat of zero datasets")),
        };
        if parts.iter().any(|p| p.dim() != dim) {
            return Err(Error::size("concat: datasets have mixed dims"));
        }
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut inputs = Matrix::zeros(total, dim);
        let mut labels = Vec::with_capacity(total);
        let mut row = 0;
        for p in parts {
            for i in 0..p.len() {
                inputs.row_mut(row).copy_from_slice(p.inputs.row(i));
                labels.push(p.labels[i]);
                row += 1;
            }
        }
        Ok(LabeledDataset { inputs, labels })
    }
}

/// A generated task: train and eval splits around shared class means.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub train: LabeledDataset,
    pub eval: LabeledDataset,
}

/// Source tasks plus a shifted target task.
#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub sources: Vec<Task>,
    pub target: Task,
}

/// One mini-batch view of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn draw_split(
    spec: &TaskSpec,
    means: &Matrix,
    rotation: Option<&Matrix>,
    n: usize,
    noise_stream: u64,
) -> LabeledDataset {
    let mut rng = rng::open(spec.seed, noise_stream);
    let mut inputs = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Round-robin labels keep per-class counts within one of each other.
        let label = i % spec.classes;
        labels.push(label);
        let row = inputs.row_mut(i);
        for (d, m) in row.iter_mut().zip(means.row(label)) {
            let z: f64 = rng.sample(StandardNormal);
            *d = m + spec.noise_scale * z;
        }
    }
    if let Some(q) = rotation {
        // x -> Q x, applied row-wise.
        inputs = inputs.a_mul_bt(q);
    }
    LabeledDataset { inputs, labels }
}

/// Generates train and eval splits for one task spec.
pub fn generate_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let mut mean_rng = rng::open(spec.seed, stream::CLASS_MEANS);
    let means = Matrix::from_fn(spec.classes, spec.dim, |_, _| mean_rng.sample(StandardNormal));
    let rotation = spec.rotation_seed.map(|rs| random_orthogonal(spec.dim, rs));
    let train = draw_split(spec, &means, rotation.as_ref(), spec.samples, stream::TRAIN_NOISE);
    let eval = draw_split(spec, &means, rotation.as_ref(), spec.eval_samples, stream::EVAL_NOISE);
    Ok(Task { spec: spec.clone(), train, eval })
}

/// Builds `source_seeds.len()` unrotated source tasks plus one rotated
/// target task. All tasks share `base`'s dims and sampling parameters; the
/// target re-draws class means from `target_seed` and rotates its inputs,
/// so fine-tuning on it pulls the network away from the sources.
pub fn make_suite(source_seeds: &[u64], target_seed: u64, base: &TaskSpec) -> Result<Suite> {
    if source_seeds.is_empty() {
        return Err(Error::validation("make_suite needs at least one source seed"));
    }
    let mut seen = source_seeds.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != source_seeds.len() || source_seeds.contains(&target_seed) {
        return Err(Error::validation("source and target seeds must be distinct"));
    }
    let mut sources = Vec::with_capacity(source_seeds.len());
    for &seed in source_seeds {
        let spec = TaskSpec { seed, rotation_seed: None, ..base.clone() };
        sources.push(generate_task(&spec)?);
    }
    let target_spec =
        TaskSpec { seed: target_seed, rotation_seed: Some(target_seed), ..base.clone() };
    let target = generate_task(&target_spec)?;
    Ok(Suite { sources, target })
}

/// Splits a dataset into shuffled mini-batches for one epoch.
///
/// The shuffle is keyed by `(seed, epoch)`, so repeating a call reproduces
/// the exact batch sequence. A trailing partial batch is kept.
pub fn batches(
    data: &LabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::validation("cannot batch an empty dataset"));
    }
    if batch_size > data.len() {
        return Err(Error::validation(format!(
            "batch_size {} exceeds dataset size {}",
            batch_size,
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng::open(seed, stream::SHUFFLE_BASE + epoch);
    order.shuffle(&mut shuffle_rng);
    let dim = data.dim();
    let mut out = Vec::with_capacity(data.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut inputs = Matrix::zeros(chunk.len(), dim);
        let mut labels = Vec::with_capacity(chunk.len());
        for (row, &idx) in chunk.iter().enumerate() {
            inputs.row_mut(row).copy_from_slice(data.inputs.row(idx));
            labels.push(data.labels[idx]);
        }
        out.push(Batch { inputs, labels });
    }
    Ok(out)
}
