//! JSON run configuration: one file describes the model, the data suite,
//! the curvature fit, and the fine-tuning grid.
//!
//! Unknown fields are rejected so a typo cannot silently change a run.
//! `canonical_hash` fingerprints the parsed configuration; it is stored in
//! checkpoints so outputs can be traced back to their inputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::{CurvatureKind, LaplaceConfig};
use crate::error::{Error, Result};
use crate::harness::SweepPlan;
use crate::tasks::{make_suite, Suite, TaskSpec};
use crate::training::{OptimizerKind, Schedule, TrainConfig};

pub const DEFAULT_EVAL_SAMPLES: usize = 500;

fn default_eval_samples() -> usize {
    DEFAULT_EVAL_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input dim followed by hidden widths; the classifier layer is
    /// appended automatically.
    pub dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub layers: Vec<usize>,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub dropout_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source_seeds: Vec<u64>,
    pub target_seed: u64,
    pub dim: usize,
    pub classes: usize,
    /// Training rows per task.
    pub samples: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaplaceSection {
    /// Curvature names; a sweep runs each one.
    pub kinds: Vec<String>,
    pub batches_per_subdataset: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub per_example: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: String,
    pub optimizer: String,
    pub eval_every: usize,
    /// Exactly one of `lambda` / `lambda_grid` must be present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
    /// Exactly one of `seed` / `seeds` must be present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

/// Base-model pretraining hyperparameters. Optional: when absent, the
/// train section's optimizer settings are reused with the model seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: String,
    pub optimizer: String,
    pub eval_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub data: DataConfig,
    pub laplace: LaplaceSection,
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
}

pub fn parse_schedule(s: &str) -> Result<Schedule> {
    match s {
        "constant" => Ok(Schedule::Constant),
        "linear-decay" => Ok(Schedule::LinearDecay),
        other => Err(Error::validation(format!(
            "unknown schedule '{other}' (expected constant or linear-decay)"
        ))),
    }
}

pub fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(Error::validation(format!(
            "unknown optimizer '{other}' (expected sgd or adam)"
        ))),
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(s)
            .map_err(|e| Error::validation(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}: {e}", path.display()), e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.dims.len() < 2 {
            return Err(Error::validation("model.dims needs input and at least one hidden dim"));
        }
        if self.model.dims[0] != self.data.dim {
            return Err(Error::validation(format!(
                "model.dims[0] = {} but data.dim = {}",
                self.model.dims[0], self.data.dim
            )));
        }
        if self.model.num_classes != self.data.classes {
            return Err(Error::validation(format!(
                "model.num_classes = {} but data.classes = {}",
                self.model.num_classes, self.data.classes
            )));
        }
        if self.lora.layers.is_empty() {
            return Err(Error::validation("lora.layers must not be empty"));
        }
        let n_layers = self.model.dims.len();
        if let Some(&bad) = self.lora.layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::validation(format!(
                "lora layer {bad} out of range for a {n_layers}-layer model"
            )));
        }
        if self.laplace.kinds.is_empty() {
            return Err(Error::validation("laplace.kinds must not be empty"));
        }
        for k in &self.laplace.kinds {
            CurvatureKind::parse(k)?;
        }
        if self.laplace.batches_per_subdataset == 0 || self.laplace.batch_size == 0 {
            return Err(Error::validation("laplace batch shape must be positive"));
        }
        parse_schedule(&self.train.schedule)?;
        parse_optimizer(&self.train.optimizer)?;
        match (&self.train.lambda, &self.train.lambda_grid) {
            (Some(_), Some(_)) => {
                return Err(Error::validation("set train.lambda or train.lambda_grid, not both"))
            }
            (None, None) => {
                return Err(Error::validation("set one of train.lambda or train.lambda_grid"))
            }
            (None, Some(g)) if g.is_empty() => {
                return Err(Error::validation("train.lambda_grid must not be empty"))
            }
            _ => {}
        }
        match (&self.train.seed, &self.train.seeds) {
            (Some(_), Some(_)) => {
                return Err(Error::validation("set train.seed or train.seeds, not both"))
            }
            (None, None) => {
                return Err(Error::validation("set one of train.seed or train.seeds"))
            }
            (None, Some(s)) if s.is_empty() => {
                return Err(Error::validation("train.seeds must not be empty"))
            }
            _ => {}
        }
        if let Some(p) = &self.pretrain {
            parse_schedule(&p.schedule)?;
            parse_optimizer(&p.optimizer)?;
        }
        // Optimizer shape checks (epochs, cadence, rate) run in the
        // training configs built below.
        self.train_config(0).validate()?;
        self.pretrain_config().validate()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form (fixed field order, no
    /// whitespace). Reparsing serialized output reproduces the hash.
    pub fn canonical_hash(&self) -> [u8; 32] {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        h.finalize().into()
    }

    pub fn canonical_hash_hex(&self) -> String {
        self.canonical_hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        match (&self.train.lambda, &self.train.lambda_grid) {
            (Some(l), None) => vec![*l],
            (None, Some(g)) => g.clone(),
            _ => unreachable!("validated"),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match (&self.train.seed, &self.train.seeds) {
            (Some(s), None) => vec![*s],
            (None, Some(g)) => g.clone(),
            _ => unreachable!("validated"),
        }
    }

    pub fn kinds(&self) -> Result<Vec<CurvatureKind>> {
        self.laplace.kinds.iter().map(|k| CurvatureKind::parse(k)).collect()
    }

    pub fn plan(&self) -> Result<SweepPlan> {
        Ok(SweepPlan { kinds: self.kinds()?, lambdas: self.lambdas(), seeds: self.seeds() })
    }

    pub fn task_base(&self) -> TaskSpec {
        TaskSpec {
            seed: 0,
            dim: self.data.dim,
            classes: self.data.classes,
            samples: self.data.samples,
            eval_samples: self.data.eval_samples,
            noise_scale: self.data.noise_scale,
            rotation_seed: None,
        }
    }

    pub fn suite(&self) -> Result<Suite> {
        make_suite(&self.data.source_seeds, self.data.target_seed, &self.task_base())
    }

    /// Laplace fit settings for one curvature kind.
    pub fn laplace_config(&self, kind: CurvatureKind) -> LaplaceConfig {
        LaplaceConfig {
            kind,
            batches_per_subdataset: self.laplace.batches_per_subdataset,
            batch_size: self.laplace.batch_size,
            per_example: self.laplace.per_example,
            seed: self.laplace.seed,
        }
    }

    /// Fine-tuning settings for one sweep seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            schedule: parse_schedule(&self.train.schedule).expect("validated"),
            optimizer: parse_optimizer(&self.train.optimizer).expect("validated"),
            eval_every: self.train.eval_every,
            seed,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        match &self.pretrain {
            Some(p) => TrainConfig {
                epochs: p.epochs,
                batch_size: p.batch_size,
                learning_rate: p.learning_rate,
                schedule: parse_schedule(&p.schedule).expect("validated"),
                optimizer: parse_optimizer(&p.optimizer).expect("validated"),
                eval_every: p.eval_every,
                seed: p.seed,
            },
            None => TrainConfig { seed: self.model.seed, ..self.train_config(0) },
        }
    }
}
