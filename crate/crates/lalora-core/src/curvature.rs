//! Curvature estimates over adapter weights.
//!
//! Three approximations of the empirical Fisher of the source data, per
//! adapter, in increasing fidelity and cost:
//!
//! * `Diag`: squared gradients, one nonnegative value per parameter.
//! * `BlockKfac`: Kronecker factors `L00 ⊗ R11` for the `A` block and
//!   `L11 ⊗ R22` for the `B` block, where `L00 = E[x xᵀ]`,
//!   `R11 = E[g1 g1ᵀ]`, `L11 = E[s1 s1ᵀ]`, `R22 = E[g2 g2ᵀ]`.
//! * `BlockTriKfac`: adds the cross block `L01 ⊗ R12` with
//!   `L01 = E[x s1ᵀ]` and `R12 = E[g1 g2ᵀ]`, coupling `A` and `B`.
//!
//! `Identity` stands in for a plain L2 penalty and stores nothing.
//!
//! Batches within a sub-dataset enter K-FAC factors by arithmetic mean;
//! sub-datasets are combined factor-wise by mean as well, which expands to
//! the average of all cross products of per-sub-dataset factors. Diagonal
//! estimates sum across batches and sub-datasets instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{vec_mat, Matrix};
use crate::model::{backward, forward, Mode, Network};
use crate::tasks::{batches, Batch, LabeledDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureKind {
    Diag,
    BlockKfac,
    BlockTriKfac,
    Identity,
}

impl CurvatureKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CurvatureKind::Diag => "diag",
            CurvatureKind::BlockKfac => "block-kfac",
            CurvatureKind::BlockTriKfac => "block-tri-kfac",
            CurvatureKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diag" => Ok(CurvatureKind::Diag),
            "block-kfac" => Ok(CurvatureKind::BlockKfac),
            "block-tri-kfac" => Ok(CurvatureKind::BlockTriKfac),
            "identity" => Ok(CurvatureKind::Identity),
            other => Err(Error::validation(format!("unknown curvature kind '{other}'"))),
        }
    }
}

/// Per-parameter precisions in column-stacked `vec` order:
/// `d_a[q*r + alpha]` belongs to `A[alpha, q]`, `d_b[alpha*D_out + p]` to
/// `B[p, alpha]`. Entries are nonnegative by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagPrecision {
    pub d_a: Vec<f64>,
    pub d_b: Vec<f64>,
}

/// Kronecker factors for one adapter. `l01`/`r12` are present exactly when
/// the estimate carries the tri-diagonal cross block.
#[derive(Debug, Clone, PartialEq)]
pub struct KfacFactors {
    /// `D_in x D_in`, second moment of post-dropout inputs.
    pub l00: Matrix,
    /// `r x r`, second moment of `g1`.
    pub r11: Matrix,
    /// `r x r`, second moment of `s1 = A x`.
    pub l11: Matrix,
    /// `D_out x D_out`, second moment of `g2`.
    pub r22: Matrix,
    /// `D_in x r`, cross moment `E[x s1ᵀ]`.
    pub l01: Option<Matrix>,
    /// `r x D_out`, cross moment `E[g1 g2ᵀ]`.
    pub r12: Option<Matrix>,
}

/// Adapter shape record for estimates that store no data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterDims {
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterCurvature {
    Diag(DiagPrecision),
    Kfac(KfacFactors),
    Identity(AdapterDims),
}

impl AdapterCurvature {
    pub fn dims(&self) -> AdapterDims {
        match self {
            AdapterCurvature::Diag(d) => {
                // Lengths alone cannot split r from D_in; dims are tracked
                // alongside wherever they matter, so this is only used for
                // storage accounting.
                AdapterDims { rank: 0, d_in: d.d_a.len(), d_out: d.d_b.len() }
            }
            AdapterCurvature::Kfac(f) => AdapterDims {
                rank: f.r11.rows(),
                d_in: f.l00.rows(),
                d_out: f.r22.rows(),
            },
            AdapterCurvature::Identity(d) => *d,
        }
    }

    /// Number of stored curvature values.
    pub fn stored_values(&self) -> usize {
        match self {
            AdapterCurvature::Diag(d) => d.d_a.len() + d.d_b.len(),
            AdapterCurvature::Kfac(f) => {
                let mut n = f.l00.rows() * f.l00.cols()
                    + f.r11.rows() * f.r11.cols()
                    + f.l11.rows() * f.l11.cols()
                    + f.r22.rows() * f.r22.cols();
                if let Some(l01) = &f.l01 {
                    n += l01.rows() * l01.cols();
                }
                if let Some(r12) = &f.r12 {
                    n += r12.rows() * r12.cols();
                }
                n
            }
            AdapterCurvature::Identity(_) => 0,
        }
    }
}

/// Identifies one batch that entered the fit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDescriptor {
    pub subdataset: usize,
    pub shuffle_seed: u64,
    pub batch_index: usize,
}

/// What the estimate was fitted on. `descriptors.len()` is always
/// `subdataset_count * batches_per_subdataset`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub subdataset_count: usize,
    pub batches_per_subdataset: usize,
    pub batch_size: usize,
    pub descriptors: Vec<BatchDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureEstimate {
    pub kind: CurvatureKind,
    /// One entry per adapter, in layer order.
    pub adapters: Vec<AdapterCurvature>,
    pub provenance: Provenance,
}

/// How to fit an estimate from source datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceConfig {
    pub kind: CurvatureKind,
    pub batches_per_subdataset: usize,
    pub batch_size: usize,
    /// Diagonal only: square per-example gradients and average within the
    /// batch instead of squaring the batch-summed gradient.
    pub per_example: bool,
    pub seed: u64,
}

fn require_adapters(network: &Network) -> Result<Vec<usize>> {
    let layers = network.adapter_layers();
    if layers.is_empty() {
        return Err(Error::contract("curvature fitting needs a network with adapters"));
    }
    Ok(layers)
}

/// Squares a matrix entrywise.
fn squared(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        let v = m.get(i, j);
        v * v
    })
}

/// Runs forward (eval mode, no dropout) and backward on a batch, returning
/// the filled trace.
fn traced_backward(network: &Network, batch: &Batch) -> Result<crate::model::ForwardTrace> {
    let mut trace = forward(network, &batch.inputs, Mode::Eval, None)?;
    backward(network, &mut trace, &batch.labels)?;
    Ok(trace)
}

/// Diagonal empirical Fisher over one sub-dataset: per batch either the
/// squared gradient of the batch-summed log-likelihood (default) or the
/// within-batch mean of squared per-example gradients; batches sum.
pub fn fit_diag(
    network: &Network,
    batch_list: &[Batch],
    per_example: bool,
) -> Result<Vec<DiagPrecision>> {
    require_adapters(network)?;
    if batch_list.is_empty() {
        return Err(Error::validation("fit_diag needs at least one batch"));
    }
    let mut acc: Option<Vec<DiagPrecision>> = None;
    for batch in batch_list {
        let trace = traced_backward(network, batch)?;
        let mut per_adapter = Vec::with_capacity(trace.adapters.len());
        for at in &trace.adapters {
            let g1 = at.g1.as_ref().expect("backward fills g1");
            let g2 = at.g2.as_ref().expect("backward fills g2");
            let (sq_a, sq_b) = if per_example {
                // mean_i over rows of (g1_i x_iᵀ)^2 and (g2_i s1_iᵀ)^2,
                // computed as products of elementwise squares.
                let inv = 1.0 / batch.len() as f64;
                (
                    squared(g1).at_mul_b(&squared(&at.x)).scale(inv),
                    squared(g2).at_mul_b(&squared(&at.a1)).scale(inv),
                )
            } else {
                // Gradient of the batch-summed log-likelihood, squared.
                (squared(&g1.at_mul_b(&at.x)), squared(&g2.at_mul_b(&at.a1)))
            };
            per_adapter.push(DiagPrecision {
                d_a: vec_mat(&sq_a).data,
                d_b: vec_mat(&sq_b).data,
            });
        }
        acc = Some(match acc {
            None => per_adapter,
            Some(mut sum) => {
                for (s, d) in sum.iter_mut().zip(&per_adapter) {
                    for (a, b) in s.d_a.iter_mut().zip(&d.d_a) {
                        *a += b;
                    }
                    for (a, b) in s.d_b.iter_mut().zip(&d.d_b) {
                        *a += b;
                    }
                }
                sum
            }
        });
    }
    Ok(acc.expect("nonempty batch list"))
}

/// Kronecker factors from one batch: each factor is the within-batch mean
/// of the corresponding outer product.
pub fn fit_kfac_batch(
    network: &Network,
    batch: &Batch,
    with_cross: bool,
) -> Result<Vec<KfacFactors>> {
    require_adapters(network)?;
    let trace = traced_backward(network, batch)?;
    let inv = 1.0 / batch.len() as f64;
    let mut out = Vec::with_capacity(trace.adapters.len());
    for at in &trace.adapters {
        let g1 = at.g1.as_ref().expect("backward fills g1");
        let g2 = at.g2.as_ref().expect("backward fills g2");
        out.push(KfacFactors {
            l00: at.x.at_mul_b(&at.x).scale(inv),
            r11: g1.at_mul_b(g1).scale(inv),
            l11: at.a1.at_mul_b(&at.a1).scale(inv),
            r22: g2.at_mul_b(g2).scale(inv),
            l01: with_cross.then(|| at.x.at_mul_b(&at.a1).scale(inv)),
            r12: with_cross.then(|| g1.at_mul_b(g2).scale(inv)),
        });
    }
    Ok(out)
}

fn zip_factors(
    acc: &mut Vec<KfacFactors>,
    next: &[KfacFactors],
    mut combine: impl FnMut(&mut Matrix, &Matrix),
) -> Result<()> {
    if acc.len() != next.len() {
        return Err(Error::size("factor lists cover different adapter counts"));
    }
    for (a, b) in acc.iter_mut().zip(next) {
        if a.l00.shape() != b.l00.shape()
            || a.r22.shape() != b.r22.shape()
            || a.l01.is_some() != b.l01.is_some()
        {
            return Err(Error::size("factor shapes disagree"));
        }
        combine(&mut a.l00, &b.l00);
        combine(&mut a.r11, &b.r11);
        combine(&mut a.l11, &b.l11);
        combine(&mut a.r22, &b.r22);
        if let (Some(al), Some(bl)) = (a.l01.as_mut(), b.l01.as_ref()) {
            combine(al, bl);
        }
        if let (Some(ar), Some(br)) = (a.r12.as_mut(), b.r12.as_ref()) {
            combine(ar, br);
        }
    }
    Ok(())
}

fn scale_factors(factors: &mut [KfacFactors], s: f64) {
    for f in factors {
        f.l00 = f.l00.scale(s);
        f.r11 = f.r11.scale(s);
        f.l11 = f.l11.scale(s);
        f.r22 = f.r22.scale(s);
        if let Some(l) = &f.l01 {
            f.l01 = Some(l.scale(s));
        }
        if let Some(r) = &f.r12 {
            f.r12 = Some(r.scale(s));
        }
    }
}

/// Arithmetic mean of per-batch factors, factor by factor.
pub fn average_over_batches(per_batch: &[Vec<KfacFactors>]) -> Result<Vec<KfacFactors>> {
    if per_batch.is_empty() {
        return Err(Error::validation("average_over_batches needs at least one batch"));
    }
    let mut acc = per_batch[0].clone();
    for next in &per_batch[1..] {
        zip_factors(&mut acc, next, |a, b| a.axpy(1.0, b))?;
    }
    scale_factors(&mut acc, 1.0 / per_batch.len() as f64);
    Ok(acc)
}

/// Joins per-sub-dataset payloads into one estimate: diagonals sum
/// entrywise, Kronecker factors average factor-wise. Averaging each side
/// separately makes the implied precision
/// `(1/n^2) (sum_j L_j) ⊗ (sum_j R_j)`, whose expansion contains every
/// cross product of sub-dataset factors.
pub fn combine_subdatasets(
    kind: CurvatureKind,
    per_sub: &[Vec<AdapterCurvature>],
) -> Result<Vec<AdapterCurvature>> {
    if per_sub.is_empty() {
        return Err(Error::validation("combine_subdatasets needs at least one sub-dataset"));
    }
    let first = per_sub[0].clone();
    match kind {
        CurvatureKind::Identity => Ok(first),
        CurvatureKind::Diag => {
            let mut acc: Vec<DiagPrecision> = first
                .into_iter()
                .map(|c| match c {
                    AdapterCurvature::Diag(d) => Ok(d),
                    _ => Err(Error::contract("expected diagonal payloads")),
                })
                .collect::<Result<_>>()?;
            for sub in &per_sub[1..] {
                if sub.len() != acc.len() {
                    return Err(Error::size("sub-datasets cover different adapter counts"));
                }
                for (a, c) in acc.iter_mut().zip(sub) {
                    let AdapterCurvature::Diag(d) = c else {
                        return Err(Error::contract("expected diagonal payloads"));
                    };
                    if a.d_a.len() != d.d_a.len() || a.d_b.len() != d.d_b.len() {
                        return Err(Error::size("diagonal lengths disagree"));
                    }
                    for (x, y) in a.d_a.iter_mut().zip(&d.d_a) {
                        *x += y;
                    }
                    for (x, y) in a.d_b.iter_mut().zip(&d.d_b) {
                        *x += y;
                    }
                }
            }
            Ok(acc.into_iter().map(AdapterCurvature::Diag).collect())
        }
        CurvatureKind::BlockKfac | CurvatureKind::BlockTriKfac => {
            let mut acc: Vec<KfacFactors> = first
                .into_iter()
                .map(|c| match c {
                    AdapterCurvature::Kfac(f) => Ok(f),
                    _ => Err(Error::contract("expected Kronecker payloads")),
                })
                .collect::<Result<_>>()?;
            for sub in &per_sub[1..] {
                let next: Vec<KfacFactors> = sub
                    .iter()
                    .map(|c| match c {
                        AdapterCurvature::Kfac(f) => Ok(f.clone()),
                        _ => Err(Error::contract("expected Kronecker payloads")),
                    })
                    .collect::<Result<_>>()?;
                zip_factors(&mut acc, &next, |a, b| a.axpy(1.0, b))?;
            }
            scale_factors(&mut acc, 1.0 / per_sub.len() as f64);
            Ok(acc.into_iter().map(AdapterCurvature::Kfac).collect())
        }
    }
}

/// Full pipeline: for each source dataset, take the first
/// `batches_per_subdataset` batches of a seeded shuffle, fit, then combine
/// across sub-datasets.
pub fn fit_curvature(
    network: &Network,
    sources: &[&LabeledDataset],
    cfg: &LaplaceConfig,
) -> Result<CurvatureEstimate> {
    require_adapters(network)?;
    if sources.is_empty() {
        return Err(Error::validation("fit_curvature needs at least one source dataset"));
    }
    if cfg.batches_per_subdataset == 0 {
        return Err(Error::validation("batches_per_subdataset must be at least 1"));
    }
    let mut per_sub = Vec::with_capacity(sources.len());
    let mut descriptors = Vec::new();
    for (j, data) in sources.iter().enumerate() {
        let shuffle_seed = cfg.seed.wrapping_add(j as u64);
        let all = batches(data, cfg.batch_size, shuffle_seed, 0)?;
        if all.len() < cfg.batches_per_subdataset {
            return Err(Error::validation(format!(
                "sub-dataset {j} yields {} batches, need {}",
                all.len(),
                cfg.batches_per_subdataset
            )));
        }
        let used = &all[..cfg.batches_per_subdataset];
        for (bi, _) in used.iter().enumerate() {
            descriptors.push(BatchDescriptor {
                subdataset: j,
                shuffle_seed,
                batch_index: bi,
            });
        }
        let payload = match cfg.kind {
            CurvatureKind::Diag => fit_diag(network, used, cfg.per_example)?
                .into_iter()
                .map(AdapterCurvature::Diag)
                .collect(),
            CurvatureKind::BlockKfac | CurvatureKind::BlockTriKfac => {
                let with_cross = cfg.kind == CurvatureKind::BlockTriKfac;
                let per_batch: Vec<Vec<KfacFactors>> = used
                    .iter()
                    .map(|b| fit_kfac_batch(network, b, with_cross))
                    .collect::<Result<_>>()?;
                average_over_batches(&per_batch)?
                    .into_iter()
                    .map(AdapterCurvature::Kfac)
                    .collect()
            }
            CurvatureKind::Identity => network
                .adapters()
                .iter()
                .map(|ad| {
                    AdapterCurvature::Identity(AdapterDims {
                        rank: ad.rank(),
                        d_in: ad.d_in(),
                        d_out: ad.d_out(),
                    })
                })
                .collect(),
        };
        per_sub.push(payload);
    }
    let adapters = combine_subdatasets(cfg.kind, &per_sub)?;
    Ok(CurvatureEstimate {
        kind: cfg.kind,
        adapters,
        provenance: Provenance {
            subdataset_count: sources.len(),
            batches_per_subdataset: cfg.batches_per_subdataset,
            batch_size: cfg.batch_size,
            descriptors,
        },
    })
}
