//! Slow reference implementations used to cross-check the fast paths.
//!
//! Everything here recomputes its answer from first principles through a
//! different code path than the production routines: per-example scalar
//! backprop instead of batched matrix backprop, materialized dense
//! precision matrices instead of factored quadratic forms, central finite
//! differences instead of analytic gradients, and Monte Carlo sampling
//! instead of closed-form covariances. Agreement between routes is the
//! evidence; none of this is meant to be fast.

use crate::curvature::AdapterCurvature;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_factor, inverse, kron, Matrix};
use crate::model::{Activation, Network};
use crate::tasks::Batch;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gradients of one example's log-likelihood with respect to each
/// adapter's `A` and `B`, in layer order.
pub type ExampleGrads = Vec<(Matrix, Matrix)>;

/// Per-example log-likelihood gradients for every adapter, computed by a
/// scalar forward/backward over one row at a time.
pub fn per_example_grads(network: &Network, batch: &Batch) -> Result<Vec<ExampleGrads>> {
    let adapters = network.adapter_layers();
    if adapters.is_empty() {
        return Err(Error::contract("per_example_grads needs adapters"));
    }
    let mut out = Vec::with_capacity(batch.len());
    for n in 0..batch.len() {
        let x0: Vec<f64> = (0..network.input_dim).map(|j| batch.inputs.get(n, j)).collect();
        out.push(one_example(network, &x0, batch.labels[n])?);
    }
    Ok(out)
}

fn one_example(network: &Network, x0: &[f64], label: usize) -> Result<ExampleGrads> {
    if label >= network.num_classes {
        return Err(Error::validation(format!("label {label} out of range")));
    }
    // Forward, keeping per-layer inputs, adapter intermediates and preacts.
    let mut x = x0.to_vec();
    let mut inputs_per_layer = Vec::new();
    let mut a1_per_layer: Vec<Option<Vec<f64>>> = Vec::new();
    let mut preacts = Vec::new();
    for layer in &network.layers {
        inputs_per_layer.push(x.clone());
        let w = &layer.linear.weight;
        let mut s = layer.linear.bias.clone();
        for p in 0..w.rows() {
            for j in 0..w.cols() {
                s[p] += w.get(p, j) * x[j];
            }
        }
        if let Some(ad) = &layer.adapter {
            let mut a1 = vec![0.0; ad.rank()];
            for alpha in 0..ad.rank() {
                for j in 0..ad.d_in() {
                    a1[alpha] += ad.a.get(alpha, j) * x[j];
                }
            }
            for p in 0..ad.d_out() {
                let mut acc = 0.0;
                for alpha in 0..ad.rank() {
                    acc += ad.b.get(p, alpha) * a1[alpha];
                }
                s[p] += ad.scaling() * acc;
            }
            a1_per_layer.push(Some(a1));
        } else {
            a1_per_layer.push(None);
        }
        preacts.push(s.clone());
        x = match layer.activation {
            Activation::Relu => s.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Identity => s,
        };
    }
    // Log-likelihood gradient at the logits: onehot - softmax.
    let logits = preacts.last().expect("network has layers");
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut g: Vec<f64> = exps.iter().map(|&e| -e / z).collect();
    g[label] += 1.0;
    // Backward through the layers.
    let mut grads: Vec<(Matrix, Matrix)> = Vec::new();
    for (li, layer) in network.layers.iter().enumerate().rev() {
        let x_in = &inputs_per_layer[li];
        let mut g_input = vec![0.0; x_in.len()];
        let w = &layer.linear.weight;
        for p in 0..w.rows() {
            for j in 0..w.cols() {
                g_input[j] += w.get(p, j) * g[p];
            }
        }
        if let Some(ad) = &layer.adapter {
            let a1 = a1_per_layer[li].as_ref().expect("adapter stored a1");
            let g2: Vec<f64> = g.iter().map(|&v| ad.scaling() * v).collect();
            let mut g1 = vec![0.0; ad.rank()];
            for alpha in 0..ad.rank() {
                for p in 0..ad.d_out() {
                    g1[alpha] += ad.b.get(p, alpha) * g2[p];
                }
            }
            let d_a = Matrix::from_fn(ad.rank(), ad.d_in(), |alpha, j| g1[alpha] * x_in[j]);
            let d_b = Matrix::from_fn(ad.d_out(), ad.rank(), |p, alpha| g2[p] * a1[alpha]);
            grads.push((d_a, d_b));
            for j in 0..ad.d_in() {
                for alpha in 0..ad.rank() {
                    g_input[j] += ad.a.get(alpha, j) * g1[alpha];
                }
            }
        }
        if li > 0 {
            g = g_input;
            if network.layers[li - 1].activation == Activation::Relu {
                for (gv, &pre) in g.iter_mut().zip(&preacts[li - 1]) {
                    if pre <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
        }
    }
    grads.reverse();
    Ok(grads)
}

/// Stacks one adapter's gradients into `[vec(dA); vec(dB)]`, column-major
/// within each block.
pub fn stack_adapter_grad(d_a: &Matrix, d_b: &Matrix) -> Vec<f64> {
    let mut u = crate::linalg::vec_mat(d_a).data;
    u.extend(crate::linalg::vec_mat(d_b).data);
    u
}

/// Dense empirical Fisher per adapter: the batch mean of
/// `vec(grad) vec(grad)ᵀ` over stacked per-example gradients.
pub fn dense_fisher(network: &Network, batch: &Batch) -> Result<Vec<Matrix>> {
    let per_example = per_example_grads(network, batch)?;
    let n_adapters = per_example[0].len();
    let mut fishers = Vec::with_capacity(n_adapters);
    for ai in 0..n_adapters {
        let dim = {
            let (da, db) = &per_example[0][ai];
            da.rows() * da.cols() + db.rows() * db.cols()
        };
        let mut f = Matrix::zeros(dim, dim);
        for grads in &per_example {
            let (da, db) = &grads[ai];
            let u = stack_adapter_grad(da, db);
            for i in 0..dim {
                if u[i] == 0.0 {
                    continue;
                }
                for j in 0..dim {
                    let v = f.get(i, j) + u[i] * u[j];
                    f.set(i, j, v);
                }
            }
        }
        fishers.push(f.scale(1.0 / batch.len() as f64));
    }
    Ok(fishers)
}

/// Materializes one adapter's curvature as a dense precision over the
/// stacked parameter vector `[vec(A); vec(B)]`.
pub fn dense_from_curvature(curv: &AdapterCurvature, rank: usize) -> Result<Matrix> {
    match curv {
        AdapterCurvature::Diag(d) => {
            let dim = d.d_a.len() + d.d_b.len();
            let mut m = Matrix::zeros(dim, dim);
            for (i, &v) in d.d_a.iter().chain(&d.d_b).enumerate() {
                m.set(i, i, v);
            }
            Ok(m)
        }
        AdapterCurvature::Kfac(f) => {
            let fa = kron(&f.l00, &f.r11)?;
            let fb = kron(&f.l11, &f.r22)?;
            let na = fa.rows();
            let nb = fb.rows();
            let mut m = Matrix::zeros(na + nb, na + nb);
            for i in 0..na {
                for j in 0..na {
                    m.set(i, j, fa.get(i, j));
                }
            }
            for i in 0..nb {
                for j in 0..nb {
                    m.set(na + i, na + j, fb.get(i, j));
                }
            }
            if let (Some(l01), Some(r12)) = (&f.l01, &f.r12) {
                let c = kron(l01, r12)?;
                if c.shape() != (na, nb) {
                    return Err(Error::size("cross block has inconsistent shape"));
                }
                for i in 0..na {
                    for j in 0..nb {
                        m.set(i, na + j, c.get(i, j));
                        m.set(na + j, i, c.get(i, j));
                    }
                }
            }
            Ok(m)
        }
        AdapterCurvature::Identity(dims) => {
            if dims.rank != rank {
                return Err(Error::contract("rank disagrees with the stored dims"));
            }
            Ok(Matrix::identity(rank * dims.d_in + rank * dims.d_out))
        }
    }
}

/// Quadratic form `uᵀ M v` with explicitly materialized `M`.
pub fn dense_quadform(m: &Matrix, u: &[f64], v: &[f64]) -> Result<f64> {
    if m.shape() != (u.len(), v.len()) {
        return Err(Error::size("dense_quadform shapes disagree"));
    }
    let mut total = 0.0;
    for i in 0..u.len() {
        if u[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..v.len() {
            row += m.get(i, j) * v[j];
        }
        total += u[i] * row;
    }
    Ok(total)
}

/// Central-difference gradients of an arbitrary scalar loss with respect
/// to every adapter parameter. Returns `(layer_index, dA, dB)` per adapter.
pub fn finite_diff_adapter_grads(
    network: &Network,
    loss: &mut dyn FnMut(&Network) -> Result<f64>,
    h: f64,
) -> Result<Vec<(usize, Matrix, Matrix)>> {
    if !(h > 0.0) {
        return Err(Error::validation("step size must be positive"));
    }
    let mut out = Vec::new();
    for layer_index in network.adapter_layers() {
        let ad = network.layers[layer_index].adapter.as_ref().expect("adapted layer");
        let mut sides = Vec::new();
        for (rows, cols, is_a) in [
            (ad.a.rows(), ad.a.cols(), true),
            (ad.b.rows(), ad.b.cols(), false),
        ] {
            let mut g = Matrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let mut eval = |delta: f64| -> Result<f64> {
                        let mut net = network.clone();
                        let m = {
                            let ad = net.layers[layer_index].adapter.as_mut().unwrap();
                            if is_a {
                                &mut ad.a
                            } else {
                                &mut ad.b
                            }
                        };
                        m.set(i, j, m.get(i, j) + delta);
                        loss(&net)
                    };
                    g.set(i, j, (eval(h)? - eval(-h)?) / (2.0 * h));
                }
            }
            sides.push(g);
        }
        let d_b = sides.pop().expect("two sides");
        let d_a = sides.pop().expect("two sides");
        out.push((layer_index, d_a, d_b));
    }
    Ok(out)
}

/// Draws `DeltaW = B A` from an independent diagonal Gaussian over the
/// adapter entries with variances `1/d`. Zero precisions are singular.
pub struct DiagSampler {
    std_a: Matrix,
    std_b: Matrix,
}

impl DiagSampler {
    pub fn new(d_a: &[f64], d_b: &[f64], rank: usize, d_in: usize, d_out: usize) -> Result<Self> {
        if d_a.len() != rank * d_in || d_b.len() != rank * d_out {
            return Err(Error::size("precision lengths do not match the dims"));
        }
        if d_a.iter().chain(d_b).any(|&v| v <= 0.0) {
            return Err(Error::singular("nonpositive precision cannot be sampled"));
        }
        let std_a = Matrix::from_fn(rank, d_in, |alpha, q| 1.0 / d_a[q * rank + alpha].sqrt());
        let std_b = Matrix::from_fn(d_out, rank, |p, alpha| 1.0 / d_b[alpha * d_out + p].sqrt());
        Ok(DiagSampler { std_a, std_b })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Matrix {
        let a = Matrix::from_fn(self.std_a.rows(), self.std_a.cols(), |i, j| {
            self.std_a.get(i, j) * rng.sample::<f64, _>(StandardNormal)
        });
        let b = Matrix::from_fn(self.std_b.rows(), self.std_b.cols(), |i, j| {
            self.std_b.get(i, j) * rng.sample::<f64, _>(StandardNormal)
        });
        b.matmul(&a)
    }
}

/// Draws `DeltaW = B A` from the factored Kronecker posterior:
/// `vec(A) ~ N(0, L00^-1 ⊗ R11^-1)` realized as `chol(R11^-1) Z chol(L00^-1)ᵀ`,
/// and likewise for `B`.
pub struct KfacSampler {
    ca_left: Matrix,
    ca_right: Matrix,
    cb_left: Matrix,
    cb_right: Matrix,
}

impl KfacSampler {
    pub fn new(f: &crate::curvature::KfacFactors) -> Result<Self> {
        Ok(KfacSampler {
            ca_left: cholesky_factor(&inverse(&f.r11)?)?,
            ca_right: cholesky_factor(&inverse(&f.l00)?)?,
            cb_left: cholesky_factor(&inverse(&f.r22)?)?,
            cb_right: cholesky_factor(&inverse(&f.l11)?)?,
        })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Matrix {
        let za = Matrix::from_fn(self.ca_left.rows(), self.ca_right.rows(), |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let zb = Matrix::from_fn(self.cb_left.rows(), self.cb_right.rows(), |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let a = self.ca_left.matmul(&za).a_mul_bt(&self.ca_right);
        let b = self.cb_left.matmul(&zb).a_mul_bt(&self.cb_right);
        b.matmul(&a)
    }
}

/// A Monte Carlo covariance estimate with a jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McCov {
    pub estimate: f64,
    pub std_error: f64,
}

/// Estimates `Cov(DeltaW[p,q], DeltaW[k,l])` for each requested pair by
/// sampling, with delete-one-group jackknife standard errors.
pub fn mc_deltaw_cov(
    draw: &mut dyn FnMut(&mut ChaCha8Rng) -> Matrix,
    pairs: &[((usize, usize), (usize, usize))],
    n_samples: usize,
    n_groups: usize,
    seed: u64,
) -> Result<Vec<McCov>> {
    if n_groups < 2 || n_samples % n_groups != 0 {
        return Err(Error::validation(
            "samples must split evenly into at least two groups",
        ));
    }
    if pairs.is_empty() {
        return Err(Error::validation("no index pairs requested"));
    }
    let group_size = n_samples / n_groups;
    let mut rng = crate::rng::open(seed, 9901);
    // Per pair and group: sums of the two entries and of their product.
    let np = pairs.len();
    let mut sum_u = vec![vec![0.0f64; n_groups]; np];
    let mut sum_v = vec![vec![0.0f64; n_groups]; np];
    let mut sum_uv = vec![vec![0.0f64; n_groups]; np];
    for g in 0..n_groups {
        for _ in 0..group_size {
            let dw = draw(&mut rng);
            for (pi, &((p, q), (k, l))) in pairs.iter().enumerate() {
                let u = dw.get(p, q);
                let v = dw.get(k, l);
                sum_u[pi][g] += u;
                sum_v[pi][g] += v;
                sum_uv[pi][g] += u * v;
            }
        }
    }
    let mut out = Vec::with_capacity(np);
    for pi in 0..np {
        let tot_u: f64 = sum_u[pi].iter().sum();
        let tot_v: f64 = sum_v[pi].iter().sum();
        let tot_uv: f64 = sum_uv[pi].iter().sum();
        let n = n_samples as f64;
        let full = tot_uv / n - (tot_u / n) * (tot_v / n);
        // Jackknife over deleted groups.
        let n_del = n - group_size as f64;
        let mut reps = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            let u = (tot_u - sum_u[pi][g]) / n_del;
            let v = (tot_v - sum_v[pi][g]) / n_del;
            let uv = (tot_uv - sum_uv[pi][g]) / n_del;
            reps.push(uv - u * v);
        }
        let mean_rep: f64 = reps.iter().sum::<f64>() / n_groups as f64;
        let var: f64 = reps.iter().map(|r| (r - mean_rep) * (r - mean_rep)).sum::<f64>()
            * (n_groups as f64 - 1.0)
            / n_groups as f64;
        out.push(McCov { estimate: full, std_error: var.sqrt() });
    }
    Ok(out)
}
