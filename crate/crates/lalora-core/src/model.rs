//! Feed-forward classifier with low-rank adapters.
//!
//! An adapted layer computes `s = W0 x + b + (alpha/r) * B A x_drop`, where
//! `A` is `r x D_in` (Gaussian init), `B` is `D_out x r` (zero init), and
//! `x_drop` applies dropout in train mode only. With `B = 0` the adapter is
//! exactly inert, so attaching adapters never changes the base model's
//! outputs.
//!
//! [`backward`] fills the forward trace with `g1` and `g2`, the per-example
//! gradients of the summed log-likelihood with respect to `s1 = A x_drop`
//! and `s2 = B s1`. The `alpha/r` factor rides inside them, so the
//! per-example gradient with respect to `A` is exactly `g1 x_dropᵀ` and the
//! one with respect to `B` is `g2 s1ᵀ`. Curvature fitting builds its
//! factors from these traces.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Initial standard deviation for adapter `A` entries.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `D_out x D_in`.
    pub weight: Matrix,
    /// Length `D_out`.
    pub bias: Vec<f64>,
}

/// Low-rank adapter pair. `a` is `r x D_in`, `b` is `D_out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// The `alpha/r` factor applied to the adapter path.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Effective weight update `(alpha/r) * B A`, rank at most `r`.
    pub fn merge_deltaw(&self) -> Matrix {
        self.b.matmul(&self.a).scale(self.scaling())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub linear: Linear,
    pub adapter: Option<LoraAdapter>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Set by [`attach_lora`]; a frozen base is never updated by training.
    pub base_frozen: bool,
}

impl Network {
    /// Layer indices that carry adapters, in layer order.
    pub fn adapter_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.adapter.as_ref().map(|_| i))
            .collect()
    }

    pub fn adapters(&self) -> Vec<&LoraAdapter> {
        self.layers.iter().filter_map(|l| l.adapter.as_ref()).collect()
    }

    pub fn adapters_mut(&mut self) -> Vec<&mut LoraAdapter> {
        self.layers.iter_mut().filter_map(|l| l.adapter.as_mut()).collect()
    }

    /// FNV-1a hash of the base weight and bias bit patterns. Adapter
    /// parameters are excluded, so the hash certifies the frozen base.
    pub fn base_params_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for layer in &self.layers {
            for &v in layer.linear.weight.as_slice() {
                eat(v);
            }
            for &v in &layer.linear.bias {
                eat(v);
            }
        }
        h
    }
}

/// Per-adapter intermediates captured during a forward pass.
///
/// `x` is the post-dropout layer input (`batch x D_in`), `a1 = x Aᵀ`
/// (`batch x r`). `g1` and `g2` stay `None` until [`backward`] runs.
#[derive(Debug, Clone)]
pub struct AdapterTrace {
    pub layer_index: usize,
    pub x: Matrix,
    pub a1: Matrix,
    pub g1: Option<Matrix>,
    pub g2: Option<Matrix>,
    /// Elementwise multiplier realizing dropout: `x = x_in .* drop_scale`.
    /// Absent when dropout was inactive.
    drop_scale: Option<Matrix>,
}

/// Everything a backward pass needs, captured per layer.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub batch_size: usize,
    pub logits: Matrix,
    pub adapters: Vec<AdapterTrace>,
    layer_inputs: Vec<Matrix>,
    preacts: Vec<Matrix>,
    num_layers: usize,
}

/// Gradients of the mean NLL over the batch.
#[derive(Debug, Clone)]
pub struct Grads {
    /// `(layer_index, dA, dB)` for each adapter, in layer order.
    pub adapters: Vec<(usize, Matrix, Matrix)>,
    /// `(dW, dbias)` for each layer.
    pub base: Vec<(Matrix, Vec<f64>)>,
}

/// He-initialized multilayer perceptron: hidden layers are ReLU, the final
/// `dims.last() -> num_classes` layer emits raw logits. Biases start at
/// zero.
pub fn init_network(dims: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
    if dims.len() < 2 {
        return Err(Error::validation("need an input dim and at least one hidden dim"));
    }
    if dims.iter().any(|&d| d == 0) || num_classes < 2 {
        return Err(Error::validation("layer dims must be positive and num_classes >= 2"));
    }
    let mut rng = rng::open(seed, stream::BASE_INIT);
    let mut layers = Vec::new();
    let mut widths: Vec<usize> = dims.to_vec();
    widths.push(num_classes);
    for w in widths.windows(2) {
        let (d_in, d_out) = (w[0], w[1]);
        let std = (2.0 / d_in as f64).sqrt();
        let weight =
            Matrix::from_fn(d_out, d_in, |_, _| std * rng.sample::<f64, _>(StandardNormal));
        let is_last = layers.len() + 2 == widths.len();
        layers.push(Layer {
            linear: Linear { weight, bias: vec![0.0; d_out] },
            adapter: None,
            activation: if is_last { Activation::Identity } else { Activation::Relu },
        });
    }
    Ok(Network { layers, input_dim: dims[0], num_classes, base_frozen: false })
}

/// Attaches zero-effect adapters (`A` Gaussian with std
/// [`ADAPTER_INIT_STD`], `B` zero) to the given layers and freezes the
/// base. Layers are initialized in ascending index order so the draw
/// sequence is reproducible.
pub fn attach_lora(
    network: &mut Network,
    target_layers: &[usize],
    rank: usize,
    alpha: f64,
    dropout_p: f64,
    seed: u64,
) -> Result<()> {
    if target_layers.is_empty() {
        return Err(Error::validation("attach_lora needs at least one target layer"));
    }
    let mut sorted = target_layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != target_layers.len() {
        return Err(Error::validation("duplicate target layers"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::validation(format!("alpha must be positive, got {alpha}")));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::validation(format!("dropout_p must be in [0, 1), got {dropout_p}")));
    }
    for &idx in &sorted {
        let layer = network
            .layers
            .get(idx)
            .ok_or_else(|| Error::validation(format!("layer {idx} out of range")))?;
        if layer.adapter.is_some() {
            return Err(Error::contract(format!("layer {idx} already has an adapter")));
        }
        let (d_out, d_in) = layer.linear.weight.shape();
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::validation(format!(
                "rank {rank} outside 1..=min({d_in}, {d_out}) at layer {idx}"
            )));
        }
    }
    let mut rng = rng::open(seed, stream::ADAPTER_INIT);
    for &idx in &sorted {
        let (d_out, d_in) = network.layers[idx].linear.weight.shape();
        let a = Matrix::from_fn(rank, d_in, |_, _| {
            ADAPTER_INIT_STD * rng.sample::<f64, _>(StandardNormal)
        });
        let b = Matrix::zeros(d_out, rank);
        network.layers[idx].adapter = Some(LoraAdapter { a, b, alpha, dropout_p });
    }
    network.base_frozen = true;
    Ok(())
}

/// Runs the network on a batch of rows, recording the trace [`backward`]
/// consumes. Dropout draws from `dropout_rng` and only happens in train
/// mode with `dropout_p > 0`; eval mode never consumes randomness.
pub fn forward(
    network: &Network,
    inputs: &Matrix,
    mode: Mode,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardTrace> {
    if inputs.cols() != network.input_dim {
        return Err(Error::size(format!(
            "input has {} columns, network expects {}",
            inputs.cols(),
            network.input_dim
        )));
    }
    if inputs.rows() == 0 {
        return Err(Error::validation("empty batch"));
    }
    if !inputs.is_finite() {
        return Err(Error::numeric("non-finite input"));
    }
    let batch = inputs.rows();
    let mut x = inputs.clone();
    let mut layer_inputs = Vec::with_capacity(network.layers.len());
    let mut preacts = Vec::with_capacity(network.layers.len());
    let mut adapters = Vec::new();
    let mut rng = dropout_rng;
    for (li, layer) in network.layers.iter().enumerate() {
        let mut s = x.a_mul_bt(&layer.linear.weight);
        for i in 0..batch {
            for (v, b) in s.row_mut(i).iter_mut().zip(&layer.linear.bias) {
                *v += b;
            }
        }
        if let Some(ad) = &layer.adapter {
            let use_dropout = mode == Mode::Train && ad.dropout_p > 0.0;
            let (x_drop, drop_scale) = if use_dropout {
                let r = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::contract("train-mode dropout needs an RNG"))?;
                let keep = 1.0 - ad.dropout_p;
                let scale = Matrix::from_fn(batch, x.cols(), |_, _| {
                    if r.gen::<f64>() < ad.dropout_p {
                        0.0
                    } else {
                        1.0 / keep
                    }
                });
                let mut xd = x.clone();
                for (v, m) in xd.as_mut_slice().iter_mut().zip(scale.as_slice()) {
                    *v *= m;
                }
                (xd, Some(scale))
            } else {
                (x.clone(), None)
            };
            let a1 = x_drop.a_mul_bt(&ad.a);
            s.axpy(ad.scaling(), &a1.a_mul_bt(&ad.b));
            adapters.push(AdapterTrace {
                layer_index: li,
                x: x_drop,
                a1,
                g1: None,
                g2: None,
                drop_scale,
            });
        }
        if !s.is_finite() {
            return Err(Error::numeric(format!("non-finite pre-activation at layer {li}")));
        }
        layer_inputs.push(x);
        x = match layer.activation {
            Activation::Relu => {
                Matrix::from_fn(s.rows(), s.cols(), |i, j| s.get(i, j).max(0.0))
            }
            Activation::Identity => s.clone(),
        };
        preacts.push(s);
    }
    let logits = preacts.last().expect("at least one layer").clone();
    Ok(ForwardTrace {
        mode,
        batch_size: batch,
        logits,
        adapters,
        layer_inputs,
        preacts,
        num_layers: network.layers.len(),
    })
}

/// Mean negative log-likelihood of the labels under softmax logits,
/// computed with max-subtraction so large logits cannot overflow.
pub fn nll_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::size(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let classes = logits.cols();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::validation(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += max + sum.ln() - row[label];
    }
    let mean = total / labels.len() as f64;
    if !mean.is_finite() {
        return Err(Error::numeric("non-finite NLL"));
    }
    Ok(mean)
}

/// Softmax probabilities per row, max-subtracted.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backpropagates the batch, returning mean-NLL gradients and filling the
/// trace's `g1`/`g2` (per-example gradients of the summed log-likelihood
/// with respect to `s1` and `s2`; the adapter scaling is folded in).
pub fn backward(network: &Network, trace: &mut ForwardTrace, labels: &[usize]) -> Result<Grads> {
    if trace.num_layers != network.layers.len() || trace.logits.cols() != network.num_classes {
        return Err(Error::contract("trace does not match this network"));
    }
    if labels.len() != trace.batch_size {
        return Err(Error::contract(format!(
            "trace batch {} vs {} labels",
            trace.batch_size,
            labels.len()
        )));
    }
    for (t, layer) in trace.adapters.iter().zip(network.adapter_layers()) {
        if t.layer_index != layer {
            return Err(Error::contract("trace adapters do not match this network"));
        }
    }
    if labels.iter().any(|&l| l >= network.num_classes) {
        return Err(Error::validation("label out of range"));
    }
    let batch = trace.batch_size;
    let inv_batch = -1.0 / batch as f64;

    // Gradient of the summed log-likelihood w.r.t. logits: onehot - softmax.
    let mut g = softmax(&trace.logits);
    for (i, &label) in labels.iter().enumerate() {
        let row = g.row_mut(i);
        for v in row.iter_mut() {
            *v = -*v;
        }
        row[label] += 1.0;
    }

    let mut base = vec![(Matrix::zeros(0, 0), Vec::new()); network.layers.len()];
    let mut adapters = Vec::with_capacity(trace.adapters.len());
    let mut adapter_cursor = trace.adapters.len();

    for li in (0..network.layers.len()).rev() {
        let layer = &network.layers[li];
        let x_in = &trace.layer_inputs[li];

        let d_weight = g.at_mul_b(x_in).scale(inv_batch);
        let mut d_bias = vec![0.0; layer.linear.weight.rows()];
        for i in 0..batch {
            for (s, v) in d_bias.iter_mut().zip(g.row(i)) {
                *s += v;
            }
        }
        for v in &mut d_bias {
            *v *= inv_batch;
        }
        base[li] = (d_weight, d_bias);

        let mut adapter_to_input: Option<Matrix> = None;
        if let Some(ad) = &layer.adapter {
            adapter_cursor -= 1;
            let at = &mut trace.adapters[adapter_cursor];
            debug_assert_eq!(at.layer_index, li);
            let g2 = g.scale(ad.scaling());
            let g1 = g2.matmul(&ad.b);
            let d_a = g1.at_mul_b(&at.x).scale(inv_batch);
            let d_b = g2.at_mul_b(&at.a1).scale(inv_batch);
            if li > 0 {
                let mut through = g1.matmul(&ad.a);
                if let Some(scale) = &at.drop_scale {
                    for (v, m) in through.as_mut_slice().iter_mut().zip(scale.as_slice()) {
                        *v *= m;
                    }
                }
                adapter_to_input = Some(through);
            }
            at.g1 = Some(g1);
            at.g2 = Some(g2);
            adapters.push((li, d_a, d_b));
        }

        if li > 0 {
            let mut g_input = g.matmul(&layer.linear.weight);
            if let Some(extra) = adapter_to_input {
                g_input.axpy(1.0, &extra);
            }
            let prev = &trace.preacts[li - 1];
            g = match network.layers[li - 1].activation {
                Activation::Relu => Matrix::from_fn(g_input.rows(), g_input.cols(), |i, j| {
                    if prev.get(i, j) > 0.0 {
                        g_input.get(i, j)
                    } else {
                        0.0
                    }
                }),
                Activation::Identity => g_input,
            };
        }
    }
    adapters.reverse();
    Ok(Grads { adapters, base })
}
