//! Pretraining of the base network and penalized fine-tuning of adapters.
//!
//! Fine-tuning minimizes `mean NLL + lambda * penalty`, adapters only; the
//! base stays frozen and is checked against its hash. `lambda = 0` takes a
//! code path that never touches the posterior, so a run without a
//! posterior is reproduced bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, forward, nll_loss, Mode, Network};
use crate::posterior::LaplacePosterior;
use crate::rng::{self, stream};
use crate::tasks::{batches, LabeledDataset};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// `lr * (1 - t/T)` at step `t` of `T` total steps.
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    /// Evaluation cadence in epochs; must divide `epochs`.
    pub eval_every: usize,
    /// Seeds the per-epoch shuffles and (in train mode) dropout masks.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be a positive finite number"));
        }
        if self.eval_every == 0 || self.epochs % self.eval_every != 0 {
            return Err(Error::validation(format!(
                "eval_every ({}) must divide epochs ({})",
                self.eval_every, self.epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at step `t` of `total` steps.
pub fn scheduled_lr(base: f64, schedule: Schedule, t: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::LinearDecay => base * (1.0 - t as f64 / total as f64),
    }
}

/// Adam moments over one flat parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(param.len(), grad.len());
        assert_eq!(param.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Plain gradient descent update in place.
pub fn sgd_step(param: &mut [f64], grad: &[f64], lr: f64) {
    assert_eq!(param.len(), grad.len());
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Share of examples whose argmax logit matches the label; ties resolve
/// to the lowest class index.
pub fn evaluate_accuracy(network: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.len() == 0 {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    let trace = forward(network, &data.inputs, Mode::Eval, None)?;
    let mut hits = 0usize;
    for (i, &label) in data.labels.iter().enumerate() {
        let row = trace.logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Mean NLL of the whole dataset under eval-mode forward.
pub fn dataset_nll(network: &Network, data: &LabeledDataset) -> Result<f64> {
    let trace = forward(network, &data.inputs, Mode::Eval, None)?;
    nll_loss(&trace.logits, &data.labels)
}

/// One evaluation snapshot during fine-tuning. `train_loss` and
/// `reg_value` are recomputed on the full training set in eval mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub reg_value: f64,
    pub target_acc: f64,
    pub source_accs: Vec<f64>,
}

impl EvalRecord {
    pub fn source_acc_mean(&self) -> f64 {
        if self.source_accs.is_empty() {
            return 0.0;
        }
        self.source_accs.iter().sum::<f64>() / self.source_accs.len() as f64
    }
}

/// Datasets a fine-tuning run trains on and reports against.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneData<'a> {
    pub train: &'a LabeledDataset,
    pub target_eval: &'a LabeledDataset,
    pub source_evals: &'a [&'a LabeledDataset],
}

/// Trains the base network (no adapters attached) on a dataset. Returns
/// `(epoch, full-train eval-mode NLL)` at epoch 0 and then every
/// `eval_every` epochs.
pub fn pretrain(
    network: &mut Network,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    if !network.adapter_layers().is_empty() {
        return Err(Error::contract("pretraining runs before adapters are attached"));
    }
    let per_epoch = batches(data, cfg.batch_size, cfg.seed, 0)?.len();
    let total_steps = cfg.epochs * per_epoch;
    let mut states: Vec<(AdamState, AdamState)> = network
        .layers
        .iter()
        .map(|l| {
            (
                AdamState::new(l.linear.weight.rows() * l.linear.weight.cols()),
                AdamState::new(l.linear.bias.len()),
            )
        })
        .collect();
    let mut history = vec![(0, dataset_nll(network, data)?)];
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for batch in batches(data, cfg.batch_size, cfg.seed, epoch as u64)? {
            let mut trace = forward(network, &batch.inputs, Mode::Train, None)?;
            let grads = backward(network, &mut trace, &batch.labels)?;
            let lr = scheduled_lr(cfg.learning_rate, cfg.schedule, step, total_steps);
            for (li, (dw, dbias)) in grads.base.iter().enumerate() {
                let layer = &mut network.layers[li];
                match cfg.optimizer {
                    OptimizerKind::Sgd => {
                        sgd_step(layer.linear.weight.as_mut_slice(), dw.as_slice(), lr);
                        sgd_step(&mut layer.linear.bias, dbias, lr);
                    }
                    OptimizerKind::Adam => {
                        states[li].0.step(layer.linear.weight.as_mut_slice(), dw.as_slice(), lr);
                        states[li].1.step(&mut layer.linear.bias, dbias, lr);
                    }
                }
            }
            step += 1;
        }
        if (epoch + 1) % cfg.eval_every == 0 {
            history.push((epoch + 1, dataset_nll(network, data)?));
        }
    }
    Ok(history)
}

/// Fine-tunes adapters against `mean NLL + lambda * penalty`. The base
/// network must be frozen; only adapter weights move. With `lambda > 0` a
/// posterior is required; with `lambda = 0` it is ignored entirely.
pub fn finetune(
    network: &mut Network,
    posterior: Option<&LaplacePosterior>,
    lambda: f64,
    data: FinetuneData<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::validation("lambda must be finite and nonnegative"));
    }
    let adapter_layers = network.adapter_layers();
    if adapter_layers.is_empty() {
        return Err(Error::contract("fine-tuning needs adapters"));
    }
    if !network.base_frozen {
        return Err(Error::contract("fine-tuning requires a frozen base"));
    }
    let penalized = lambda > 0.0;
    let posterior = if penalized {
        Some(posterior.ok_or_else(|| {
            Error::contract("lambda > 0 needs a fitted posterior")
        })?)
    } else {
        None
    };
    let base_hash = network.base_params_hash();
    let per_epoch = batches(data.train, cfg.batch_size, cfg.seed, 0)?.len();
    let total_steps = cfg.epochs * per_epoch;
    let mut states: Vec<(AdamState, AdamState)> = adapter_layers
        .iter()
        .map(|&li| {
            let ad = network.layers[li].adapter.as_ref().expect("adapted layer");
            (
                AdamState::new(ad.a.rows() * ad.a.cols()),
                AdamState::new(ad.b.rows() * ad.b.cols()),
            )
        })
        .collect();
    let mut dropout_rng = rng::open(cfg.seed, stream::DROPOUT);
    let snapshot = |net: &Network, epoch: usize| -> Result<EvalRecord> {
        let reg_value = match posterior {
            Some(p) => p.reg_value(net)?,
            None => 0.0,
        };
        let mut source_accs = Vec::with_capacity(data.source_evals.len());
        for s in data.source_evals {
            source_accs.push(evaluate_accuracy(net, s)?);
        }
        Ok(EvalRecord {
            epoch,
            train_loss: dataset_nll(net, data.train)?,
            reg_value,
            target_acc: evaluate_accuracy(net, data.target_eval)?,
            source_accs,
        })
    };
    let mut history = vec![snapshot(network, 0)?];
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for batch in batches(data.train, cfg.batch_size, cfg.seed, epoch as u64)? {
            let mut trace =
                forward(network, &batch.inputs, Mode::Train, Some(&mut dropout_rng))?;
            let grads = backward(network, &mut trace, &batch.labels)?;
            let reg_grads = match posterior {
                Some(p) => Some(p.reg_grad(network)?),
                None => None,
            };
            let lr = scheduled_lr(cfg.learning_rate, cfg.schedule, step, total_steps);
            for (ai, (li, mut d_a, mut d_b)) in grads.adapters.into_iter().enumerate() {
                if let Some(rg) = &reg_grads {
                    d_a.axpy(lambda, &rg[ai].1);
                    d_b.axpy(lambda, &rg[ai].2);
                }
                if !(d_a.is_finite() && d_b.is_finite()) {
                    return Err(Error::numeric(format!(
                        "gradient overflow at layer {li}, epoch {epoch}"
                    )));
                }
                let ad = network.layers[li].adapter.as_mut().expect("adapted layer");
                match cfg.optimizer {
                    OptimizerKind::Sgd => {
                        sgd_step(ad.a.as_mut_slice(), d_a.as_slice(), lr);
                        sgd_step(ad.b.as_mut_slice(), d_b.as_slice(), lr);
                    }
                    OptimizerKind::Adam => {
                        states[ai].0.step(ad.a.as_mut_slice(), d_a.as_slice(), lr);
                        states[ai].1.step(ad.b.as_mut_slice(), d_b.as_slice(), lr);
                    }
                }
            }
            step += 1;
        }
        if (epoch + 1) % cfg.eval_every == 0 {
            history.push(snapshot(network, epoch + 1)?);
        }
    }
    if network.base_params_hash() != base_hash {
        return Err(Error::contract("base parameters moved during fine-tuning"));
    }
    Ok(history)
}
