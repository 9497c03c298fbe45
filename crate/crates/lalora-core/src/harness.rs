//! Experiment harness: grid sweeps over curvature kinds, penalty strengths
//! and seeds, plus the derived reports (balanced score, precision groups,
//! cost accounting, CSV rendering).
//!
//! A sweep shares work deliberately: the base network is pretrained once
//! outside the sweep, adapters re-attach identically per seed (attachment
//! is seed-keyed), and each `(seed, kind)` pair fits its posterior once,
//! shared across the whole lambda grid. Cells are independent after that
//! and may run on several threads; results land in slots indexed by cell,
//! so the output order never depends on the thread count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::curvature::{fit_curvature, AdapterCurvature, AdapterDims, CurvatureKind, LaplaceConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{attach_lora, Network};
use crate::posterior::LaplacePosterior;
use crate::tasks::Suite;
use crate::training::{finetune, EvalRecord, FinetuneData, TrainConfig};

pub use crate::training::evaluate_accuracy;

/// One completed sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub kind: CurvatureKind,
    pub lambda: f64,
    pub seed: u64,
    pub pretrained_target_acc: f64,
    pub pretrained_source_acc_mean: f64,
    pub final_target_acc: f64,
    pub final_source_acc_mean: f64,
    /// `100 * final_target_acc - 100 * pretrained_target_acc`, stored as
    /// computed.
    pub learning_pp: f64,
    /// `100 * pretrained_source_acc_mean - 100 * final_source_acc_mean`;
    /// positive means the source tasks got worse.
    pub forgetting_pp: f64,
    /// Penalty at the final weights. For `lambda = 0` this is computed
    /// after the fact from the fitted posterior, which training never saw.
    pub final_reg_value: f64,
    pub final_train_loss: f64,
    pub history: Vec<EvalRecord>,
}

/// The grid to sweep. Lambdas and seeds are sorted and must be unique;
/// kinds keep their given order.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub kinds: Vec<CurvatureKind>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    fn normalized(&self) -> Result<SweepPlan> {
        if self.kinds.is_empty() || self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(Error::validation("sweep plan axes must be nonempty"));
        }
        for (i, k) in self.kinds.iter().enumerate() {
            if self.kinds[..i].contains(k) {
                return Err(Error::validation(format!("duplicate curvature kind {k:?}")));
            }
        }
        let mut lambdas = self.lambdas.clone();
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::validation("lambdas must be finite and nonnegative"));
        }
        lambdas.sort_by(|a, b| a.partial_cmp(b).expect("finite lambdas"));
        if lambdas.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("duplicate lambda"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("duplicate seed"));
        }
        Ok(SweepPlan { kinds: self.kinds.clone(), lambdas, seeds })
    }
}

/// Everything a sweep needs besides the grid. `base` is the pretrained,
/// adapter-free network; `laplace.kind` and `train.seed` are overridden
/// per cell.
#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    pub suite: &'a Suite,
    pub base: &'a Network,
    pub adapter_layers: &'a [usize],
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub laplace: &'a LaplaceConfig,
    pub train: &'a TrainConfig,
}

fn attach_fresh(inputs: &SweepInputs<'_>, seed: u64) -> Result<Network> {
    let mut net = inputs.base.clone();
    attach_lora(
        &mut net,
        inputs.adapter_layers,
        inputs.rank,
        inputs.alpha,
        inputs.dropout_p,
        seed,
    )?;
    Ok(net)
}

/// Runs the full grid. `threads` caps the number of worker threads; the
/// result order is `(kind, lambda, seed)` regardless of `threads`.
pub fn sweep(
    inputs: &SweepInputs<'_>,
    plan: &SweepPlan,
    threads: usize,
) -> Result<Vec<SweepRecord>> {
    let plan = plan.normalized()?;
    if !inputs.base.adapter_layers().is_empty() {
        return Err(Error::contract("the sweep base must not carry adapters"));
    }
    inputs.train.validate()?;
    let sources: Vec<&crate::tasks::LabeledDataset> =
        inputs.suite.sources.iter().map(|t| &t.train).collect();
    // Accuracies of the bare base; fresh adapters are inert, so these are
    // also the epoch-0 numbers of every run.
    let pretrained_target_acc = evaluate_accuracy(inputs.base, &inputs.suite.target.eval)?;
    let pretrained_source_accs: Vec<f64> = inputs
        .suite
        .sources
        .iter()
        .map(|t| evaluate_accuracy(inputs.base, &t.eval))
        .collect::<Result<_>>()?;
    let pretrained_source_acc_mean =
        pretrained_source_accs.iter().sum::<f64>() / pretrained_source_accs.len() as f64;
    // One posterior per (seed, kind), shared across the lambda grid.
    let mut posteriors: Vec<Vec<LaplacePosterior>> = Vec::with_capacity(plan.seeds.len());
    for &seed in &plan.seeds {
        let net = attach_fresh(inputs, seed)?;
        let mut row = Vec::with_capacity(plan.kinds.len());
        for &kind in &plan.kinds {
            let cfg = LaplaceConfig { kind, ..inputs.laplace.clone() };
            let est = fit_curvature(&net, &sources, &cfg)?;
            row.push(LaplacePosterior::from_estimate(&net, &est)?);
        }
        posteriors.push(row);
    }
    // Flattened cells in output order.
    let mut cells = Vec::new();
    for (ki, &kind) in plan.kinds.iter().enumerate() {
        for &lambda in &plan.lambdas {
            for (si, &seed) in plan.seeds.iter().enumerate() {
                cells.push((ki, kind, lambda, si, seed));
            }
        }
    }
    let source_evals: Vec<&crate::tasks::LabeledDataset> =
        inputs.suite.sources.iter().map(|t| &t.eval).collect();
    let results: Mutex<Vec<Option<SweepRecord>>> = Mutex::new(vec![None; cells.len()]);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, cells.len());
    let run_cell = |(ki, kind, lambda, si, seed): (usize, CurvatureKind, f64, usize, u64)|
     -> Result<SweepRecord> {
        let mut net = attach_fresh(inputs, seed)?;
        let post = &posteriors[si][ki];
        let data = FinetuneData {
            train: &inputs.suite.target.train,
            target_eval: &inputs.suite.target.eval,
            source_evals: &source_evals,
        };
        let cfg = TrainConfig { seed, ..inputs.train.clone() };
        let passed = if lambda > 0.0 { Some(post) } else { None };
        let history = finetune(&mut net, passed, lambda, data, &cfg)?;
        let last = history.last().expect("history is never empty");
        let final_reg_value = if lambda > 0.0 {
            last.reg_value
        } else {
            post.reg_value(&net)?
        };
        Ok(SweepRecord {
            kind,
            lambda,
            seed,
            pretrained_target_acc,
            pretrained_source_acc_mean,
            final_target_acc: last.target_acc,
            final_source_acc_mean: last.source_acc_mean(),
            learning_pp: 100.0 * last.target_acc - 100.0 * pretrained_target_acc,
            forgetting_pp: 100.0 * pretrained_source_acc_mean
                - 100.0 * last.source_acc_mean(),
            final_reg_value,
            final_train_loss: last.train_loss,
            history,
        })
    };
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                match run_cell(cells[i]) {
                    Ok(rec) => {
                        results.lock().unwrap()[i] = Some(rec);
                    }
                    Err(e) => {
                        let mut slot = failure.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(e);
                        }
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let collected = results.into_inner().unwrap();
    Ok(collected
        .into_iter()
        .map(|r| r.expect("every cell completed"))
        .collect())
}

/// Seed-averaged accuracies and the balanced score for one lambda.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub lambda: f64,
    pub mean_target_acc: f64,
    pub mean_source_acc: f64,
    pub s_b: f64,
}

/// Per-method score report over the lambda grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScore {
    pub kind: CurvatureKind,
    pub rows: Vec<ScoreRow>,
    /// Argmax of mean source accuracy; ties go to the smallest lambda.
    pub lambda_stability: f64,
    /// Argmax of the balanced score; ties go to the smallest lambda.
    pub lambda_plasticity: f64,
}

fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        // Degenerate spread contributes nothing rather than dividing by 0.
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn argmax_smallest_lambda(lambdas: &[f64], values: &[f64]) -> f64 {
    let mut best = 0usize;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    lambdas[best]
}

/// Balanced score per method: seed-average target and source accuracy per
/// lambda, min-max normalize each across the grid, then
/// `S_B = 0.7 * target' + 0.3 * source'` (learning-weighted).
pub fn score_sb(records: &[SweepRecord]) -> Result<Vec<MethodScore>> {
    if records.is_empty() {
        return Err(Error::validation("no sweep records to score"));
    }
    let mut kinds = Vec::new();
    for r in records {
        if !kinds.contains(&r.kind) {
            kinds.push(r.kind);
        }
    }
    let mut out = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let mut lambdas: Vec<f64> = Vec::new();
        for r in records.iter().filter(|r| r.kind == kind) {
            if !lambdas.contains(&r.lambda) {
                lambdas.push(r.lambda);
            }
        }
        lambdas.sort_by(|a, b| a.partial_cmp(b).expect("finite lambdas"));
        let mut mean_target = Vec::with_capacity(lambdas.len());
        let mut mean_source = Vec::with_capacity(lambdas.len());
        let mut cell_count = None;
        for &lambda in &lambdas {
            let cell: Vec<&SweepRecord> = records
                .iter()
                .filter(|r| r.kind == kind && r.lambda == lambda)
                .collect();
            match cell_count {
                None => cell_count = Some(cell.len()),
                Some(n) if n != cell.len() => {
                    return Err(Error::validation(format!(
                        "uneven seed coverage for {kind:?} at lambda {lambda}"
                    )));
                }
                _ => {}
            }
            let n = cell.len() as f64;
            mean_target.push(cell.iter().map(|r| r.final_target_acc).sum::<f64>() / n);
            mean_source.push(cell.iter().map(|r| r.final_source_acc_mean).sum::<f64>() / n);
        }
        let t_norm = minmax_normalize(&mean_target);
        let s_norm = minmax_normalize(&mean_source);
        let s_b: Vec<f64> = s_norm
            .iter()
            .zip(&t_norm)
            .map(|(s, t)| 0.7 * t + 0.3 * s)
            .collect();
        let rows = lambdas
            .iter()
            .zip(mean_target.iter().zip(mean_source.iter().zip(&s_b)))
            .map(|(&lambda, (&mt, (&ms, &sb)))| ScoreRow {
                lambda,
                mean_target_acc: mt,
                mean_source_acc: ms,
                s_b: sb,
            })
            .collect();
        out.push(MethodScore {
            kind,
            lambda_stability: argmax_smallest_lambda(&lambdas, &mean_source),
            lambda_plasticity: argmax_smallest_lambda(&lambdas, &s_b),
            rows,
        });
    }
    Ok(out)
}

/// Precision-percentile groups over pooled diagonal precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    /// 60th/90th nearest-rank percentiles of the pooled precisions.
    pub p60: f64,
    pub p90: f64,
    /// Parameters per group: flexible (<= p60), moderate (<= p90),
    /// important (> p90).
    pub counts: [usize; 3],
    /// Mean absolute deviation from the posterior mean per group.
    pub mean_abs_dev: [f64; 3],
}

/// Nearest-rank percentile: smallest element with at least `pct` percent
/// of the sample at or below it.
fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let k = ((pct / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Splits adapter parameters into flexible/moderate/important groups by
/// their diagonal precision and reports how far each group moved from the
/// posterior mean. Ties at a threshold fall to the lower group.
pub fn group_analysis(
    posterior: &LaplacePosterior,
    network: &Network,
) -> Result<GroupReport> {
    if posterior.kind != CurvatureKind::Diag {
        return Err(Error::contract("group analysis needs a diagonal posterior"));
    }
    let mut precisions = Vec::new();
    let mut devs = Vec::new();
    for post in &posterior.adapters {
        let AdapterCurvature::Diag(d) = &post.curvature else {
            return Err(Error::contract("expected diagonal payloads"));
        };
        let ad = network.layers[post.layer_index]
            .adapter
            .as_ref()
            .ok_or_else(|| Error::contract("network lost an adapter"))?;
        if ad.a.shape() != post.mu_a.shape() || ad.b.shape() != post.mu_b.shape() {
            return Err(Error::contract("adapter shape changed since the fit"));
        }
        let (r, d_in) = post.mu_a.shape();
        let (d_out, _) = post.mu_b.shape();
        for q in 0..d_in {
            for alpha in 0..r {
                precisions.push(d.d_a[q * r + alpha]);
                devs.push((ad.a.get(alpha, q) - post.mu_a.get(alpha, q)).abs());
            }
        }
        for alpha in 0..r {
            for p in 0..d_out {
                precisions.push(d.d_b[alpha * d_out + p]);
                devs.push((ad.b.get(p, alpha) - post.mu_b.get(p, alpha)).abs());
            }
        }
    }
    let mut sorted = precisions.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite precisions"));
    let p60 = nearest_rank(&sorted, 60.0);
    let p90 = nearest_rank(&sorted, 90.0);
    let mut counts = [0usize; 3];
    let mut sums = [0.0f64; 3];
    for (&prec, &dev) in precisions.iter().zip(&devs) {
        let g = if prec <= p60 {
            0
        } else if prec <= p90 {
            1
        } else {
            2
        };
        counts[g] += 1;
        sums[g] += dev;
    }
    let mean_abs_dev = [
        if counts[0] > 0 { sums[0] / counts[0] as f64 } else { 0.0 },
        if counts[1] > 0 { sums[1] / counts[1] as f64 } else { 0.0 },
        if counts[2] > 0 { sums[2] / counts[2] as f64 } else { 0.0 },
    ];
    Ok(GroupReport { p60, p90, counts, mean_abs_dev })
}

/// Closed-form storage and work accounting for one adapter's curvature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub stored_values: usize,
    pub quadform_multiplies: usize,
}

/// Predicts [`AdapterCurvature::stored_values`] from the dims alone.
pub fn stored_values_formula(kind: CurvatureKind, dims: AdapterDims) -> usize {
    let AdapterDims { rank: r, d_in, d_out } = dims;
    match kind {
        CurvatureKind::Diag => r * (d_in + d_out),
        CurvatureKind::BlockKfac => d_in * d_in + d_out * d_out + 2 * r * r,
        CurvatureKind::BlockTriKfac => {
            d_in * d_in + d_out * d_out + 2 * r * r + r * d_in + r * d_out
        }
        CurvatureKind::Identity => 0,
    }
}

/// Multiplications the penalty evaluation performs for one adapter, dense
/// counting (no zero skipping).
pub fn quadform_multiplies_formula(kind: CurvatureKind, dims: AdapterDims) -> usize {
    let AdapterDims { rank: r, d_in, d_out } = dims;
    match kind {
        CurvatureKind::Diag => 2 * r * (d_in + d_out),
        CurvatureKind::BlockKfac => {
            (r * r * d_in + r * d_in * d_in + r * d_in)
                + (d_out * d_out * r + d_out * r * r + r * d_out)
        }
        CurvatureKind::BlockTriKfac => {
            quadform_multiplies_formula(CurvatureKind::BlockKfac, dims)
                + (r * r * d_out + r * r * d_in + r * d_in + 1)
        }
        CurvatureKind::Identity => r * d_in + r * d_out,
    }
}

pub fn cost_report(kind: CurvatureKind, dims: AdapterDims) -> CostReport {
    CostReport {
        stored_values: stored_values_formula(kind, dims),
        quadform_multiplies: quadform_multiplies_formula(kind, dims),
    }
}

/// Evaluates the penalty for one adapter with explicit dense loops,
/// counting every multiplication. The value matches the fast path; the
/// count matches [`quadform_multiplies_formula`].
pub fn counted_quadform(
    curv: &AdapterCurvature,
    dev_a: &Matrix,
    dev_b: &Matrix,
) -> Result<(f64, usize)> {
    fn matmul_counted(a: &Matrix, b: &Matrix, mults: &mut usize) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for k in 0..a.cols() {
                for j in 0..b.cols() {
                    let v = out.get(i, j) + a.get(i, k) * b.get(k, j);
                    out.set(i, j, v);
                    *mults += 1;
                }
            }
        }
        out
    }
    let mut mults = 0usize;
    match curv {
        AdapterCurvature::Identity(_) => {
            let mut total = 0.0;
            for m in [dev_a, dev_b] {
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        total += m.get(i, j) * m.get(i, j);
                        mults += 1;
                    }
                }
            }
            Ok((total, mults))
        }
        AdapterCurvature::Diag(d) => {
            let r = dev_a.rows();
            let d_out = dev_b.rows();
            if d.d_a.len() != r * dev_a.cols() || d.d_b.len() != d_out * dev_b.cols() {
                return Err(Error::size("precision lengths do not match the deviations"));
            }
            let mut total = 0.0;
            for q in 0..dev_a.cols() {
                for alpha in 0..r {
                    let dev = dev_a.get(alpha, q);
                    total += d.d_a[q * r + alpha] * dev * dev;
                    mults += 2;
                }
            }
            for alpha in 0..dev_b.cols() {
                for p in 0..d_out {
                    let dev = dev_b.get(p, alpha);
                    total += d.d_b[alpha * d_out + p] * dev * dev;
                    mults += 2;
                }
            }
            Ok((total, mults))
        }
        AdapterCurvature::Kfac(f) => {
            // A block: vec(devA)ᵀ (L00 ⊗ R11) vec(devA) as devA . (R11 devA L00ᵀ).
            let ra = matmul_counted(&f.r11, dev_a, &mut mults);
            let ral = matmul_counted(&ra, &f.l00.transpose(), &mut mults);
            let mut total = 0.0;
            for i in 0..dev_a.rows() {
                for j in 0..dev_a.cols() {
                    total += dev_a.get(i, j) * ral.get(i, j);
                    mults += 1;
                }
            }
            // B block.
            let rb = matmul_counted(&f.r22, dev_b, &mut mults);
            let rbl = matmul_counted(&rb, &f.l11.transpose(), &mut mults);
            for i in 0..dev_b.rows() {
                for j in 0..dev_b.cols() {
                    total += dev_b.get(i, j) * rbl.get(i, j);
                    mults += 1;
                }
            }
            if let (Some(l01), Some(r12)) = (&f.l01, &f.r12) {
                let rc = matmul_counted(r12, dev_b, &mut mults);
                let rcl = matmul_counted(&rc, &l01.transpose(), &mut mults);
                let mut cross = 0.0;
                for i in 0..dev_a.rows() {
                    for j in 0..dev_a.cols() {
                        cross += dev_a.get(i, j) * rcl.get(i, j);
                        mults += 1;
                    }
                }
                total += 2.0 * cross;
                mults += 1;
            }
            Ok((total, mults))
        }
    }
}

/// Seed-averaged `(learning_pp, forgetting_pp)` points that no other point
/// of the same sweep dominates (higher learning, lower forgetting).
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub kind: CurvatureKind,
    pub lambda: f64,
    pub learning_pp: f64,
    pub forgetting_pp: f64,
}

pub fn pareto_frontier(records: &[SweepRecord]) -> Result<Vec<ParetoPoint>> {
    let scores = score_sb(records)?;
    let mut points = Vec::new();
    for method in &scores {
        for row in &method.rows {
            let cell: Vec<&SweepRecord> = records
                .iter()
                .filter(|r| r.kind == method.kind && r.lambda == row.lambda)
                .collect();
            let n = cell.len() as f64;
            points.push(ParetoPoint {
                kind: method.kind,
                lambda: row.lambda,
                learning_pp: cell.iter().map(|r| r.learning_pp).sum::<f64>() / n,
                forgetting_pp: cell.iter().map(|r| r.forgetting_pp).sum::<f64>() / n,
            });
        }
    }
    let dominated = |a: &ParetoPoint, b: &ParetoPoint| {
        b.learning_pp >= a.learning_pp
            && b.forgetting_pp <= a.forgetting_pp
            && (b.learning_pp > a.learning_pp || b.forgetting_pp < a.forgetting_pp)
    };
    let mut frontier: Vec<ParetoPoint> = points
        .iter()
        .filter(|a| !points.iter().any(|b| dominated(a, b)))
        .cloned()
        .collect();
    frontier.sort_by(|a, b| {
        a.forgetting_pp
            .partial_cmp(&b.forgetting_pp)
            .expect("finite")
            .then(a.learning_pp.partial_cmp(&b.learning_pp).expect("finite"))
    });
    Ok(frontier)
}

/// Ten-significant-digit scientific notation used for every float column.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.9e}")
}

/// `run_{kind}_{lambda}_{seed}.csv`
pub fn history_filename(record: &SweepRecord) -> String {
    format!("run_{}_{}_{}.csv", record.kind.as_str(), record.lambda, record.seed)
}

/// Per-epoch history of one run as CSV. Columns: epoch, lambda, seed,
/// curvature, train_loss, reg_value, target_acc, source_acc_mean, then one
/// column per source task.
pub fn history_csv(record: &SweepRecord) -> String {
    let n_sources = record
        .history
        .first()
        .map(|r| r.source_accs.len())
        .unwrap_or(0);
    let mut out = String::new();
    out.push_str("epoch,lambda,seed,curvature,train_loss,reg_value,target_acc,source_acc_mean");
    for i in 0..n_sources {
        out.push_str(&format!(",source_acc_{i}"));
    }
    out.push_str("\r\n");
    for row in &record.history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            row.epoch,
            fmt_float(record.lambda),
            record.seed,
            record.kind.as_str(),
            fmt_float(row.train_loss),
            fmt_float(row.reg_value),
            fmt_float(row.target_acc),
            fmt_float(row.source_acc_mean()),
        ));
        for acc in &row.source_accs {
            out.push_str(&format!(",{}", fmt_float(*acc)));
        }
        out.push_str("\r\n");
    }
    out
}

/// One summary row per sweep record.
pub fn records_csv(records: &[SweepRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::validation("no records to render"));
    }
    let mut out = String::from(
        "curvature,lambda,seed,pretrained_target_acc,final_target_acc,learning_pp,\
         pretrained_source_acc_mean,final_source_acc_mean,forgetting_pp,\
         final_reg_value,final_train_loss\r\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\r\n",
            r.kind.as_str(),
            fmt_float(r.lambda),
            r.seed,
            fmt_float(r.pretrained_target_acc),
            fmt_float(r.final_target_acc),
            fmt_float(r.learning_pp),
            fmt_float(r.pretrained_source_acc_mean),
            fmt_float(r.final_source_acc_mean),
            fmt_float(r.forgetting_pp),
            fmt_float(r.final_reg_value),
            fmt_float(r.final_train_loss),
        ));
    }
    Ok(out)
}

/// Balanced-score table, one row per `(curvature, lambda)`. The chosen
/// lambdas repeat on every row of their method so the file is
/// self-contained.
pub fn scores_csv(scores: &[MethodScore]) -> Result<String> {
    if scores.is_empty() {
        return Err(Error::validation("no scores to render"));
    }
    let mut out = String::from(
        "curvature,lambda,mean_target_acc,mean_source_acc,s_b,\
         lambda_stability,lambda_plasticity\r\n",
    );
    for m in scores {
        for row in &m.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\r\n",
                m.kind.as_str(),
                fmt_float(row.lambda),
                fmt_float(row.mean_target_acc),
                fmt_float(row.mean_source_acc),
                fmt_float(row.s_b),
                fmt_float(m.lambda_stability),
                fmt_float(m.lambda_plasticity),
            ));
        }
    }
    Ok(out)
}

/// Undominated seed-averaged points, one row each.
pub fn pareto_csv(points: &[ParetoPoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::validation("no pareto points to render"));
    }
    let mut out = String::from("curvature,lambda,learning_pp,forgetting_pp\r\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\r\n",
            p.kind.as_str(),
            fmt_float(p.lambda),
            fmt_float(p.learning_pp),
            fmt_float(p.forgetting_pp),
        ));
    }
    Ok(out)
}

/// Precision-group report, one row per group; the percentile cuts repeat
/// on every row so each is self-contained.
pub fn groups_csv(report: &GroupReport) -> String {
    let mut out = String::from("group,p60,p90,count,mean_abs_dev\r\n");
    for (name, idx) in [("flexible", 0), ("moderate", 1), ("important", 2)] {
        out.push_str(&format!(
            "{},{},{},{},{}\r\n",
            name,
            fmt_float(report.p60),
            fmt_float(report.p90),
            report.counts[idx],
            fmt_float(report.mean_abs_dev[idx]),
        ));
    }
    out
}

/// Storage and penalty-evaluation costs for every adapter under every
/// curvature kind, one row per pair.
pub fn costs_csv(adapters: &[(usize, AdapterDims)]) -> Result<String> {
    if adapters.is_empty() {
        return Err(Error::validation("no adapters to cost"));
    }
    let mut out =
        String::from("layer,rank,d_in,d_out,curvature,stored_values,quadform_multiplies\r\n");
    for &(layer, dims) in adapters {
        for kind in [
            CurvatureKind::Diag,
            CurvatureKind::BlockKfac,
            CurvatureKind::BlockTriKfac,
            CurvatureKind::Identity,
        ] {
            let c = cost_report(kind, dims);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\r\n",
                layer,
                dims.rank,
                dims.d_in,
                dims.d_out,
                kind.as_str(),
                c.stored_values,
                c.quadform_multiplies,
            ));
        }
    }
    Ok(out)
}

/// Lossless machine-readable form of the sweep output. Floats survive a
/// round trip exactly, unlike the ten-digit CSV rendering.
pub fn records_json(records: &[SweepRecord]) -> Result<String> {
    serde_json::to_string_pretty(records)
        .map_err(|e| Error::validation(format!("serializing records: {e}")))
}

pub fn records_from_json(text: &str) -> Result<Vec<SweepRecord>> {
    serde_json::from_str(text).map_err(|e| Error::validation(format!("bad records file: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::DiagPrecision;
    use crate::model::init_network;
    use crate::posterior::AdapterPosterior;
    use crate::rng;
    use crate::tasks::{make_suite, TaskSpec};
    use crate::training::{pretrain, OptimizerKind, Schedule};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn synthetic_record(
        kind: CurvatureKind,
        lambda: f64,
        seed: u64,
        target: f64,
        source: f64,
    ) -> SweepRecord {
        SweepRecord {
            kind,
            lambda,
            seed,
            pretrained_target_acc: 0.1,
            pretrained_source_acc_mean: 0.65,
            final_target_acc: target,
            final_source_acc_mean: source,
            learning_pp: 100.0 * target - 100.0 * 0.1,
            forgetting_pp: 100.0 * 0.65 - 100.0 * source,
            final_reg_value: 0.0,
            final_train_loss: 0.0,
            history: vec![],
        }
    }

    // Seed-averaged accuracies measured on a reference diagonal sweep:
    // (lambda, mean target accuracy, mean source accuracy).
    const REFERENCE_GRID: [(f64, f64, f64); 7] = [
        (0.0, 0.250, 0.618),
        (10.0, 0.276, 0.635),
        (100.0, 0.233, 0.646),
        (1000.0, 0.232, 0.658),
        (10000.0, 0.226, 0.647),
        (100000.0, 0.209, 0.653),
        (1000000.0, 0.233, 0.658),
    ];

    #[test]
    fn balanced_score_reproduces_reference_grid() {
        let records: Vec<SweepRecord> = REFERENCE_GRID
            .iter()
            .map(|&(l, t, s)| synthetic_record(CurvatureKind::Diag, l, 0, t, s))
            .collect();
        let scores = score_sb(&records).unwrap();
        assert_eq!(scores.len(), 1);
        let m = &scores[0];
        let at_10 = m.rows.iter().find(|r| r.lambda == 10.0).unwrap();
        // Target spread .209..=.276 puts lambda=10 at 1.0; source spread
        // .618..=.658 puts it at .425; 0.7 + 0.3 * 0.425 = 0.8275.
        assert!((at_10.s_b - 0.8275).abs() <= 1e-12, "s_b {}", at_10.s_b);
        assert!((at_10.s_b - 0.83).abs() <= 0.005);
        // Source accuracy ties at .658 for lambda 1e3 and 1e6; the smaller wins.
        assert_eq!(m.lambda_stability, 1000.0);
        assert_eq!(m.lambda_plasticity, 10.0);
    }

    #[test]
    fn score_averages_over_seeds() {
        let mut records = Vec::new();
        for (seed, bump) in [(0u64, 0.0), (1, 0.02)] {
            records.push(synthetic_record(CurvatureKind::Diag, 0.0, seed, 0.60 + bump, 0.20));
            records.push(synthetic_record(CurvatureKind::Diag, 1.0, seed, 0.64 + bump, 0.30));
        }
        let scores = score_sb(&records).unwrap();
        let rows = &scores[0].rows;
        assert!((rows[0].mean_target_acc - 0.61).abs() <= 1e-12);
        assert!((rows[1].mean_target_acc - 0.65).abs() <= 1e-12);
        assert_eq!(rows[1].s_b, 1.0);
    }

    #[test]
    fn score_ties_pick_the_smallest_lambda() {
        let records = vec![
            synthetic_record(CurvatureKind::Diag, 0.0, 0, 0.5, 0.30),
            synthetic_record(CurvatureKind::Diag, 10.0, 0, 0.6, 0.30),
            synthetic_record(CurvatureKind::Diag, 100.0, 0, 0.6, 0.25),
        ];
        let scores = score_sb(&records).unwrap();
        assert_eq!(scores[0].lambda_stability, 0.0);
    }

    #[test]
    fn degenerate_spread_contributes_zero() {
        let records = vec![
            synthetic_record(CurvatureKind::Diag, 0.0, 0, 0.5, 0.30),
            synthetic_record(CurvatureKind::Diag, 10.0, 0, 0.5, 0.20),
        ];
        let scores = score_sb(&records).unwrap();
        // Target accuracy has no spread, so only the source part remains.
        assert_eq!(scores[0].rows[0].s_b, 0.3);
        assert_eq!(scores[0].rows[1].s_b, 0.0);
    }

    #[test]
    fn uneven_seed_coverage_is_rejected() {
        let records = vec![
            synthetic_record(CurvatureKind::Diag, 0.0, 0, 0.5, 0.3),
            synthetic_record(CurvatureKind::Diag, 1.0, 0, 0.5, 0.3),
            synthetic_record(CurvatureKind::Diag, 1.0, 1, 0.5, 0.3),
        ];
        assert!(score_sb(&records).is_err());
    }

    #[test]
    fn nearest_rank_hand_values() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(nearest_rank(&v, 60.0), 6.0);
        assert_eq!(nearest_rank(&v, 90.0), 9.0);
        assert_eq!(nearest_rank(&v, 100.0), 10.0);
        assert_eq!(nearest_rank(&[5.0], 60.0), 5.0);
    }

    fn diag_posterior_with(precisions_a: Vec<f64>, precisions_b: Vec<f64>) -> LaplacePosterior {
        let r = 2;
        let d_in = precisions_a.len() / r;
        let d_out = precisions_b.len() / r;
        LaplacePosterior {
            kind: CurvatureKind::Diag,
            adapters: vec![AdapterPosterior {
                layer_index: 0,
                mu_a: Matrix::zeros(r, d_in),
                mu_b: Matrix::zeros(d_out, r),
                curvature: AdapterCurvature::Diag(DiagPrecision {
                    d_a: precisions_a,
                    d_b: precisions_b,
                }),
            }],
        }
    }

    #[test]
    fn group_analysis_splits_60_30_10() {
        // 20 pooled parameters with distinct precisions 1..=20.
        let d_a: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let d_b: Vec<f64> = (11..=20).map(|i| i as f64).collect();
        let post = diag_posterior_with(d_a, d_b);
        let mut net = init_network(&[5, 5], 3, 1).unwrap();
        net.layers.truncate(1);
        attach_lora(&mut net, &[0], 2, 4.0, 0.0, 2).unwrap();
        // Deviate every parameter by 1 so group means are 1 exactly.
        for ad in net.adapters_mut() {
            ad.a = Matrix::from_fn(2, 5, |_, _| 1.0);
            ad.b = Matrix::from_fn(5, 2, |_, _| 1.0);
        }
        let report = group_analysis(&post, &net).unwrap();
        assert_eq!(report.counts, [12, 6, 2]);
        assert_eq!(report.p60, 12.0);
        assert_eq!(report.p90, 18.0);
        assert_eq!(report.mean_abs_dev, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn group_analysis_needs_diag() {
        let post = LaplacePosterior { kind: CurvatureKind::Identity, adapters: vec![] };
        let net = init_network(&[4, 4], 3, 1).unwrap();
        assert_eq!(
            group_analysis(&post, &net).unwrap_err().kind,
            crate::error::ErrorKind::Contract
        );
    }

    #[test]
    fn cost_formulas_on_reference_dims() {
        let dims = AdapterDims { rank: 4, d_in: 20, d_out: 64 };
        assert_eq!(stored_values_formula(CurvatureKind::Diag, dims), 336);
        assert_eq!(stored_values_formula(CurvatureKind::BlockKfac, dims), 4528);
        assert_eq!(
            stored_values_formula(CurvatureKind::BlockTriKfac, dims),
            4528 + 4 * 20 + 4 * 64
        );
        assert_eq!(stored_values_formula(CurvatureKind::Identity, dims), 0);
        assert_eq!(quadform_multiplies_formula(CurvatureKind::Diag, dims), 672);
    }

    #[test]
    fn counted_quadform_matches_formula_and_fast_path() {
        let mut net = init_network(&[7, 9], 4, 3).unwrap();
        attach_lora(&mut net, &[0], 3, 6.0, 0.0, 4).unwrap();
        let mut r = rng::open(5, 70);
        for ad in net.adapters_mut() {
            ad.b = Matrix::from_fn(9, 3, |_, _| 0.3 * r.sample::<f64, _>(StandardNormal));
        }
        let task = crate::tasks::generate_task(&TaskSpec {
            seed: 6,
            dim: 7,
            classes: 4,
            samples: 40,
            eval_samples: 4,
            noise_scale: 0.4,
            rotation_seed: None,
        })
        .unwrap();
        for kind in [
            CurvatureKind::Diag,
            CurvatureKind::BlockKfac,
            CurvatureKind::BlockTriKfac,
            CurvatureKind::Identity,
        ] {
            let est = fit_curvature(
                &net,
                &[&task.train],
                &LaplaceConfig {
                    kind,
                    batches_per_subdataset: 2,
                    batch_size: 20,
                    per_example: false,
                    seed: 7,
                },
            )
            .unwrap();
            let post = LaplacePosterior::from_estimate(&net, &est).unwrap();
            let dims = AdapterDims { rank: 3, d_in: 7, d_out: 9 };
            assert_eq!(
                est.adapters[0].stored_values(),
                stored_values_formula(kind, dims),
                "{kind:?} storage"
            );
            let dev_a = Matrix::from_fn(3, 7, |i, j| 0.1 * (i as f64 - j as f64 + 0.5));
            let dev_b = Matrix::from_fn(9, 3, |i, j| 0.05 * (j as f64 - i as f64 - 0.25));
            let (value, mults) = counted_quadform(&est.adapters[0], &dev_a, &dev_b).unwrap();
            assert_eq!(
                mults,
                quadform_multiplies_formula(kind, dims),
                "{kind:?} multiplies"
            );
            let fast = post.adapters[0].value(&dev_a, &dev_b).unwrap();
            assert!(
                (value - fast).abs() <= 1e-12 * fast.abs().max(1.0),
                "{kind:?}: {value} vs {fast}"
            );
        }
    }

    #[test]
    fn pareto_keeps_only_undominated_points() {
        let records = vec![
            synthetic_record(CurvatureKind::Diag, 0.0, 0, 0.70, 0.20),
            synthetic_record(CurvatureKind::Diag, 10.0, 0, 0.65, 0.30),
            synthetic_record(CurvatureKind::Diag, 100.0, 0, 0.60, 0.25),
        ];
        let frontier = pareto_frontier(&records).unwrap();
        // lambda=100 is dominated by lambda=10 (less learning, more
        // forgetting); the other two trade off.
        assert_eq!(frontier.len(), 2);
        assert!(frontier.iter().all(|p| p.lambda != 100.0));
        assert!(frontier[0].forgetting_pp <= frontier[1].forgetting_pp);
    }

    #[test]
    fn float_format_has_ten_significant_digits() {
        assert_eq!(fmt_float(0.618), "6.180000000e-1");
        assert_eq!(fmt_float(0.0), "0.000000000e0");
        assert_eq!(fmt_float(-12345.6789), "-1.234567890e4");
    }

    #[test]
    fn history_csv_shape_and_header() {
        let mut rec = synthetic_record(CurvatureKind::BlockKfac, 10.0, 3, 0.6, 0.3);
        rec.history = vec![
            EvalRecord {
                epoch: 0,
                train_loss: 1.5,
                reg_value: 0.0,
                target_acc: 0.1,
                source_accs: vec![0.6, 0.7],
            },
            EvalRecord {
                epoch: 2,
                train_loss: 0.9,
                reg_value: 0.25,
                target_acc: 0.5,
                source_accs: vec![0.55, 0.65],
            },
        ];
        let csv = history_csv(&rec);
        let lines: Vec<&str> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "epoch,lambda,seed,curvature,train_loss,reg_value,target_acc,source_acc_mean,source_acc_0,source_acc_1"
        );
        assert!(lines[1].starts_with("0,1.000000000e1,3,block-kfac,1.500000000e0,"));
        let mean = (0.55 + 0.65) / 2.0;
        assert!(lines[2].contains(&fmt_float(mean)));
        assert_eq!(history_filename(&rec), "run_block-kfac_10_3.csv");
    }

    #[test]
    fn records_csv_row_per_record() {
        let records = vec![
            synthetic_record(CurvatureKind::Diag, 0.0, 0, 0.6, 0.3),
            synthetic_record(CurvatureKind::Diag, 1.0, 0, 0.6, 0.3),
        ];
        let csv = records_csv(&records).unwrap();
        let lines: Vec<&str> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("curvature,lambda,seed,"));
    }

    fn tiny_sweep_inputs() -> (Suite, Network, LaplaceConfig, TrainConfig) {
        let suite = make_suite(
            &[61, 62],
            63,
            &TaskSpec {
                seed: 0,
                dim: 6,
                classes: 3,
                samples: 60,
                eval_samples: 30,
                noise_scale: 0.3,
                rotation_seed: None,
            },
        )
        .unwrap();
        let mut base = init_network(&[6, 10], 3, 5).unwrap();
        let joined = crate::tasks::LabeledDataset::concat(&[
            &suite.sources[0].train,
            &suite.sources[1].train,
        ])
        .unwrap();
        pretrain(
            &mut base,
            &joined,
            &TrainConfig {
                epochs: 6,
                batch_size: 20,
                learning_rate: 0.05,
                schedule: Schedule::Constant,
                optimizer: OptimizerKind::Adam,
                eval_every: 6,
                seed: 1,
            },
        )
        .unwrap();
        let laplace = LaplaceConfig {
            kind: CurvatureKind::Diag,
            batches_per_subdataset: 2,
            batch_size: 20,
            per_example: false,
            seed: 17,
        };
        let train = TrainConfig {
            epochs: 4,
            batch_size: 15,
            learning_rate: 0.02,
            schedule: Schedule::Constant,
            optimizer: OptimizerKind::Adam,
            eval_every: 2,
            seed: 0,
        };
        (suite, base, laplace, train)
    }

    #[test]
    fn sweep_covers_the_grid_in_order() {
        let (suite, base, laplace, train) = tiny_sweep_inputs();
        let inputs = SweepInputs {
            suite: &suite,
            base: &base,
            adapter_layers: &[0, 1],
            rank: 2,
            alpha: 4.0,
            dropout_p: 0.0,
            laplace: &laplace,
            train: &train,
        };
        let plan = SweepPlan {
            kinds: vec![CurvatureKind::Diag, CurvatureKind::Identity],
            lambdas: vec![10.0, 0.0],
            seeds: vec![1, 0],
        };
        let records = sweep(&inputs, &plan, 1).unwrap();
        assert_eq!(records.len(), 8);
        let key: Vec<(CurvatureKind, f64, u64)> =
            records.iter().map(|r| (r.kind, r.lambda, r.seed)).collect();
        assert_eq!(
            key,
            vec![
                (CurvatureKind::Diag, 0.0, 0),
                (CurvatureKind::Diag, 0.0, 1),
                (CurvatureKind::Diag, 10.0, 0),
                (CurvatureKind::Diag, 10.0, 1),
                (CurvatureKind::Identity, 0.0, 0),
                (CurvatureKind::Identity, 0.0, 1),
                (CurvatureKind::Identity, 10.0, 0),
                (CurvatureKind::Identity, 10.0, 1),
            ]
        );
        for r in &records {
            assert_eq!(r.history.len(), 3);
            assert_eq!(
                r.learning_pp,
                100.0 * r.final_target_acc - 100.0 * r.pretrained_target_acc
            );
            assert_eq!(
                r.forgetting_pp,
                100.0 * r.pretrained_source_acc_mean - 100.0 * r.final_source_acc_mean
            );
            assert_eq!(r.history[0].target_acc, r.pretrained_target_acc);
            if r.lambda == 0.0 {
                assert!(r.history.iter().all(|h| h.reg_value == 0.0));
                assert!(r.final_reg_value >= 0.0);
            }
        }
    }

    #[test]
    fn sweep_is_thread_count_invariant() {
        let (suite, base, laplace, train) = tiny_sweep_inputs();
        let inputs = SweepInputs {
            suite: &suite,
            base: &base,
            adapter_layers: &[0, 1],
            rank: 2,
            alpha: 4.0,
            dropout_p: 0.0,
            laplace: &laplace,
            train: &train,
        };
        let plan = SweepPlan {
            kinds: vec![CurvatureKind::Diag],
            lambdas: vec![0.0, 10.0],
            seeds: vec![0, 1],
        };
        let one = sweep(&inputs, &plan, 1).unwrap();
        let four = sweep(&inputs, &plan, 4).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn sweep_rejects_bad_plans() {
        let (suite, base, laplace, train) = tiny_sweep_inputs();
        let inputs = SweepInputs {
            suite: &suite,
            base: &base,
            adapter_layers: &[0],
            rank: 2,
            alpha: 4.0,
            dropout_p: 0.0,
            laplace: &laplace,
            train: &train,
        };
        let dup = SweepPlan {
            kinds: vec![CurvatureKind::Diag],
            lambdas: vec![0.0, 0.0],
            seeds: vec![0],
        };
        assert!(sweep(&inputs, &dup, 1).is_err());
        let neg = SweepPlan {
            kinds: vec![CurvatureKind::Diag],
            lambdas: vec![-1.0],
            seeds: vec![0],
        };
        assert!(sweep(&inputs, &neg, 1).is_err());
    }

    #[test]
    fn records_json_round_trip_is_exact() {
        let mut rec = synthetic_record(CurvatureKind::BlockKfac, 10.0, 3, 0.61, 0.58);
        // A value the ten-digit CSV rendering would truncate.
        rec.final_reg_value = 0.1 + 0.2;
        rec.history.push(crate::training::EvalRecord {
            epoch: 2,
            train_loss: 1.25,
            reg_value: 1.0 / 3.0,
            target_acc: 0.5,
            source_accs: vec![0.25, f64::MIN_POSITIVE],
        });
        let records = vec![rec, synthetic_record(CurvatureKind::Diag, 0.0, 3, 0.7, 0.5)];
        let text = records_json(&records).unwrap();
        let back = records_from_json(&text).unwrap();
        assert_eq!(back, records, "bitwise equality after JSON round trip");
        assert!(records_from_json("[{\"bogus\": 1}]").is_err());
    }

    #[test]
    fn scores_and_pareto_render_one_row_per_entry() {
        let records = vec![
            synthetic_record(CurvatureKind::Diag, 0.0, 1, 0.70, 0.50),
            synthetic_record(CurvatureKind::Diag, 10.0, 1, 0.65, 0.60),
        ];
        let scores = score_sb(&records).unwrap();
        let csv = scores_csv(&scores).unwrap();
        let lines: Vec<&str> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), 3, "header plus two lambda rows");
        assert_eq!(
            lines[0],
            "curvature,lambda,mean_target_acc,mean_source_acc,s_b,\
             lambda_stability,lambda_plasticity"
        );
        assert!(lines[1].starts_with("diag,"));
        let frontier = pareto_frontier(&records).unwrap();
        let pcsv = pareto_csv(&frontier).unwrap();
        let plines: Vec<&str> = pcsv.split("\r\n").filter(|l| !l.is_empty()).collect();
        assert_eq!(plines[0], "curvature,lambda,learning_pp,forgetting_pp");
        assert_eq!(plines.len(), frontier.len() + 1);
    }

    #[test]
    fn groups_and_costs_render_flat_tables() {
        let report = GroupReport {
            p60: 1.0,
            p90: 2.0,
            counts: [6, 3, 1],
            mean_abs_dev: [0.3, 0.2, 0.1],
        };
        let csv = groups_csv(&report);
        let lines: Vec<&str> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("flexible,"));
        assert!(lines[3].starts_with("important,"));

        let dims = AdapterDims { rank: 4, d_in: 20, d_out: 64 };
        let csv = costs_csv(&[(0, dims)]).unwrap();
        let lines: Vec<&str> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), 5, "header plus one row per kind");
        let diag_row = format!(
            "0,4,20,64,diag,{},{}",
            stored_values_formula(CurvatureKind::Diag, dims),
            quadform_multiplies_formula(CurvatureKind::Diag, dims),
        );
        assert_eq!(lines[1], diag_row);
        assert!(costs_csv(&[]).is_err());
    }
}
