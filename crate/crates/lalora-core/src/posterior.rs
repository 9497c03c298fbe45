//! Gaussian posterior over adapter weights, centered at the weights seen
//! when the curvature was fitted.
//!
//! The posterior supplies the quadratic penalty
//! `sum_adapters vec(dev)ᵀ F vec(dev)` on deviations `dev = theta - mu`,
//! where `F` is whichever curvature approximation was fitted. Any 1/2
//! factor belongs to the penalty strength, not to this module.

use crate::curvature::{AdapterCurvature, CurvatureEstimate, CurvatureKind};
use crate::error::{Error, ErrorKind, Result};
use crate::linalg::{inverse, kron_quadform, Matrix};
use crate::model::Network;

/// Posterior for one adapter: the mean (a snapshot of `A` and `B` at fit
/// time) plus the fitted curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPosterior {
    pub layer_index: usize,
    pub mu_a: Matrix,
    pub mu_b: Matrix,
    pub curvature: AdapterCurvature,
}

impl AdapterPosterior {
    /// Quadratic form of the curvature on a deviation.
    pub fn value(&self, dev_a: &Matrix, dev_b: &Matrix) -> Result<f64> {
        self.check_dev_shapes(dev_a, dev_b)?;
        match &self.curvature {
            AdapterCurvature::Identity(_) => {
                Ok(dev_a.frob_dot(dev_a) + dev_b.frob_dot(dev_b))
            }
            AdapterCurvature::Diag(d) => {
                let r = dev_a.rows();
                let d_out = dev_b.rows();
                let mut total = 0.0;
                for q in 0..dev_a.cols() {
                    for alpha in 0..r {
                        let dev = dev_a.get(alpha, q);
                        total += d.d_a[q * r + alpha] * dev * dev;
                    }
                }
                for alpha in 0..dev_b.cols() {
                    for p in 0..d_out {
                        let dev = dev_b.get(p, alpha);
                        total += d.d_b[alpha * d_out + p] * dev * dev;
                    }
                }
                Ok(total)
            }
            AdapterCurvature::Kfac(f) => {
                let mut total = kron_quadform(&f.l00, &f.r11, dev_a, dev_a)?
                    + kron_quadform(&f.l11, &f.r22, dev_b, dev_b)?;
                if let (Some(l01), Some(r12)) = (&f.l01, &f.r12) {
                    total += 2.0 * kron_quadform(l01, r12, dev_a, dev_b)?;
                }
                Ok(total)
            }
        }
    }

    /// Gradient of [`value`](Self::value) with respect to the deviation,
    /// returned as `(dA, dB)` in weight shape.
    pub fn grad(&self, dev_a: &Matrix, dev_b: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_dev_shapes(dev_a, dev_b)?;
        match &self.curvature {
            AdapterCurvature::Identity(_) => Ok((dev_a.scale(2.0), dev_b.scale(2.0))),
            AdapterCurvature::Diag(d) => {
                let r = dev_a.rows();
                let d_out = dev_b.rows();
                let ga = Matrix::from_fn(r, dev_a.cols(), |alpha, q| {
                    2.0 * d.d_a[q * r + alpha] * dev_a.get(alpha, q)
                });
                let gb = Matrix::from_fn(d_out, dev_b.cols(), |p, alpha| {
                    2.0 * d.d_b[alpha * d_out + p] * dev_b.get(p, alpha)
                });
                Ok((ga, gb))
            }
            AdapterCurvature::Kfac(f) => {
                let mut ga = f.r11.matmul(dev_a).a_mul_bt(&f.l00).scale(2.0);
                let mut gb = f.r22.matmul(dev_b).a_mul_bt(&f.l11).scale(2.0);
                if let (Some(l01), Some(r12)) = (&f.l01, &f.r12) {
                    ga.axpy(2.0, &r12.matmul(dev_b).a_mul_bt(l01));
                    gb.axpy(2.0, &r12.transpose().matmul(dev_a).matmul(l01));
                }
                Ok((ga, gb))
            }
        }
    }

    fn check_dev_shapes(&self, dev_a: &Matrix, dev_b: &Matrix) -> Result<()> {
        if dev_a.shape() != self.mu_a.shape() || dev_b.shape() != self.mu_b.shape() {
            return Err(Error::size(format!(
                "deviation shapes {:?}/{:?} do not match the posterior mean {:?}/{:?}",
                dev_a.shape(),
                dev_b.shape(),
                self.mu_a.shape(),
                self.mu_b.shape()
            )));
        }
        Ok(())
    }
}

/// Posterior over every adapter in a network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacePosterior {
    pub kind: CurvatureKind,
    pub adapters: Vec<AdapterPosterior>,
}

impl LaplacePosterior {
    /// Snapshots the network's adapter weights as the mean and pairs them
    /// with the fitted curvature.
    pub fn from_estimate(network: &Network, estimate: &CurvatureEstimate) -> Result<Self> {
        let layers = network.adapter_layers();
        if layers.len() != estimate.adapters.len() {
            return Err(Error::contract(format!(
                "estimate covers {} adapters, network has {}",
                estimate.adapters.len(),
                layers.len()
            )));
        }
        let mut adapters = Vec::with_capacity(layers.len());
        for (&layer_index, curv) in layers.iter().zip(&estimate.adapters) {
            let ad = network.layers[layer_index]
                .adapter
                .as_ref()
                .expect("adapter_layers returns adapted layers");
            let (r, d_in, d_out) = (ad.rank(), ad.d_in(), ad.d_out());
            let consistent = match curv {
                AdapterCurvature::Diag(d) => {
                    d.d_a.len() == r * d_in && d.d_b.len() == r * d_out
                }
                AdapterCurvature::Kfac(f) => {
                    f.l00.shape() == (d_in, d_in)
                        && f.r11.shape() == (r, r)
                        && f.l11.shape() == (r, r)
                        && f.r22.shape() == (d_out, d_out)
                }
                AdapterCurvature::Identity(dims) => {
                    (dims.rank, dims.d_in, dims.d_out) == (r, d_in, d_out)
                }
            };
            if !consistent {
                return Err(Error::contract(format!(
                    "curvature dims do not match the adapter at layer {layer_index}"
                )));
            }
            adapters.push(AdapterPosterior {
                layer_index,
                mu_a: ad.a.clone(),
                mu_b: ad.b.clone(),
                curvature: curv.clone(),
            });
        }
        Ok(LaplacePosterior { kind: estimate.kind, adapters })
    }

    fn deviations<'a>(
        &'a self,
        network: &Network,
    ) -> Result<Vec<(&'a AdapterPosterior, Matrix, Matrix)>> {
        let layers = network.adapter_layers();
        if layers.len() != self.adapters.len()
            || layers.iter().zip(&self.adapters).any(|(&l, p)| l != p.layer_index)
        {
            return Err(Error::contract(
                "network adapter layout does not match the posterior",
            ));
        }
        let mut out = Vec::with_capacity(self.adapters.len());
        for post in &self.adapters {
            let ad = network.layers[post.layer_index]
                .adapter
                .as_ref()
                .expect("layout checked above");
            if ad.a.shape() != post.mu_a.shape() || ad.b.shape() != post.mu_b.shape() {
                return Err(Error::contract(format!(
                    "adapter shape changed at layer {}",
                    post.layer_index
                )));
            }
            out.push((post, ad.a.sub(&post.mu_a), ad.b.sub(&post.mu_b)));
        }
        Ok(out)
    }

    /// Total quadratic penalty at the network's current adapter weights.
    pub fn reg_value(&self, network: &Network) -> Result<f64> {
        let mut total = 0.0;
        for (post, dev_a, dev_b) in self.deviations(network)? {
            total += post.value(&dev_a, &dev_b)?;
        }
        if !total.is_finite() {
            return Err(Error::numeric("penalty value is not finite"));
        }
        Ok(total)
    }

    /// Gradient of the penalty: `(layer_index, dA, dB)` per adapter.
    pub fn reg_grad(&self, network: &Network) -> Result<Vec<(usize, Matrix, Matrix)>> {
        let mut out = Vec::with_capacity(self.adapters.len());
        for (post, dev_a, dev_b) in self.deviations(network)? {
            let (ga, gb) = post.grad(&dev_a, &dev_b)?;
            out.push((post.layer_index, ga, gb));
        }
        Ok(out)
    }

    /// Evaluates the cross term both ways,
    /// `vec(devA)ᵀ (L01 ⊗ R12) vec(devB)` and
    /// `vec(devB)ᵀ (L01ᵀ ⊗ R12ᵀ) vec(devA)`, per adapter. The two agree up
    /// to floating-point rounding.
    pub fn cross_term_symmetric(&self, network: &Network) -> Result<Vec<(f64, f64)>> {
        if self.kind != CurvatureKind::BlockTriKfac {
            return Err(Error::contract(
                "cross terms exist only for the tri-diagonal estimate",
            ));
        }
        let mut out = Vec::with_capacity(self.adapters.len());
        for (post, dev_a, dev_b) in self.deviations(network)? {
            let AdapterCurvature::Kfac(f) = &post.curvature else {
                return Err(Error::contract("expected Kronecker payloads"));
            };
            let (Some(l01), Some(r12)) = (&f.l01, &f.r12) else {
                return Err(Error::contract("cross factors are missing"));
            };
            let t1 = kron_quadform(l01, r12, &dev_a, &dev_b)?;
            let t2 = kron_quadform(&l01.transpose(), &r12.transpose(), &dev_b, &dev_a)?;
            out.push((t1, t2));
        }
        Ok(out)
    }
}

/// Covariance of `DeltaW = B A` entries under an independent diagonal
/// posterior with zero-mean factors: `Cov(DeltaW[p,q], DeltaW[k,l])` is
/// zero unless `(p,q) == (k,l)`, where it is
/// `sum_alpha d_b[alpha*D_out+p]^-1 * d_a[q*r+alpha]^-1`.
pub fn deltaw_cov_diag(
    post: &AdapterPosterior,
    (p, q): (usize, usize),
    (k, l): (usize, usize),
) -> Result<f64> {
    let AdapterCurvature::Diag(d) = &post.curvature else {
        return Err(Error::contract(
            "deltaw_cov_diag needs a diagonal posterior",
        ));
    };
    let (r, d_in) = post.mu_a.shape();
    let (d_out, _) = post.mu_b.shape();
    if p >= d_out || k >= d_out || q >= d_in || l >= d_in {
        return Err(Error::size(format!(
            "index out of range for a {d_out}x{d_in} weight update"
        )));
    }
    if (p, q) != (k, l) {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for alpha in 0..r {
        let db = d.d_b[alpha * d_out + p];
        let da = d.d_a[q * r + alpha];
        if db == 0.0 || da == 0.0 {
            return Err(Error::singular(format!(
                "zero precision touched at rank index {alpha}"
            )));
        }
        total += (1.0 / db) * (1.0 / da);
    }
    Ok(total)
}

/// Covariance of `vec(DeltaW)` collapsed from a block Kronecker posterior:
/// a scalar times `L00^-1 ⊗ R22^-1` over the column-stacked update.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedCov {
    pub l00_inv: Matrix,
    pub r22_inv: Matrix,
    pub scalar: f64,
}

impl CollapsedCov {
    /// `Cov(DeltaW[p,q], DeltaW[k,l])`.
    pub fn cov(&self, (p, q): (usize, usize), (k, l): (usize, usize)) -> f64 {
        self.scalar * self.l00_inv.get(q, l) * self.r22_inv.get(p, k)
    }
}

/// Collapses a block Kronecker posterior over `DeltaW = B A` with zero-mean
/// factors. Writing `Cov(vec A) = L00^-1 ⊗ R11^-1` and
/// `Cov(vec B) = L11^-1 ⊗ R22^-1`, independence gives
/// `Cov(vec DeltaW) = s * (L00^-1 ⊗ R22^-1)` with
/// `s = sum_{alpha,beta} (L11^-1 .* R11^-1)[alpha,beta]`.
pub fn bkfac_collapse_scalar(post: &AdapterPosterior) -> Result<CollapsedCov> {
    let AdapterCurvature::Kfac(f) = &post.curvature else {
        return Err(Error::contract(
            "covariance collapse needs a Kronecker posterior",
        ));
    };
    if f.l01.is_some() || f.r12.is_some() {
        return Err(Error::contract(
            "covariance collapse is defined for the block estimate without cross factors",
        ));
    }
    let map_singular = |e: Error, which: &str| {
        if e.kind == ErrorKind::Singular {
            Error::singular(format!("{which} is singular"))
        } else {
            e
        }
    };
    let l00_inv = inverse(&f.l00).map_err(|e| map_singular(e, "L00"))?;
    let r22_inv = inverse(&f.r22).map_err(|e| map_singular(e, "R22"))?;
    let l11_inv = inverse(&f.l11).map_err(|e| map_singular(e, "L11"))?;
    let r11_inv = inverse(&f.r11).map_err(|e| map_singular(e, "R11"))?;
    let mut scalar = 0.0;
    for alpha in 0..l11_inv.rows() {
        for beta in 0..l11_inv.cols() {
            scalar += l11_inv.get(alpha, beta) * r11_inv.get(alpha, beta);
        }
    }
    Ok(CollapsedCov { l00_inv, r22_inv, scalar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{fit_curvature, AdapterDims, DiagPrecision, KfacFactors, LaplaceConfig};
    use crate::linalg::{kron, vec_mat, Vector};
    use crate::model::{attach_lora, init_network};
    use crate::rng;
    use crate::tasks::{generate_task, TaskSpec};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fitted(seed: u64, kind: CurvatureKind) -> (Network, LaplacePosterior) {
        let mut net = init_network(&[5, 6], 3, seed).unwrap();
        attach_lora(&mut net, &[0, 1], 2, 4.0, 0.0, seed + 1).unwrap();
        let mut r = rng::open(seed, 70);
        for ad in net.adapters_mut() {
            let (rows, cols) = ad.b.shape();
            ad.b = Matrix::from_fn(rows, cols, |_, _| {
                0.3 * r.sample::<f64, _>(StandardNormal)
            });
        }
        let spec = TaskSpec {
            seed: seed + 5,
            dim: 5,
            classes: 3,
            samples: 60,
            eval_samples: 6,
            noise_scale: 0.4,
            rotation_seed: None,
        };
        let task = generate_task(&spec).unwrap();
        let cfg = LaplaceConfig {
            kind,
            batches_per_subdataset: 3,
            batch_size: 20,
            per_example: false,
            seed: seed + 9,
        };
        let est = fit_curvature(&net, &[&task.train], &cfg).unwrap();
        let post = LaplacePosterior::from_estimate(&net, &est).unwrap();
        (net, post)
    }

    fn perturb(net: &mut Network, seed: u64, scale: f64) {
        let mut r = rng::open(seed, 71);
        for ad in net.adapters_mut() {
            let (ra, ca) = ad.a.shape();
            let (rb, cb) = ad.b.shape();
            let ea = Matrix::from_fn(ra, ca, |_, _| scale * r.sample::<f64, _>(StandardNormal));
            let eb = Matrix::from_fn(rb, cb, |_, _| scale * r.sample::<f64, _>(StandardNormal));
            ad.a = ad.a.add(&ea);
            ad.b = ad.b.add(&eb);
        }
    }

    #[test]
    fn penalty_is_zero_at_the_mean() {
        for kind in [
            CurvatureKind::Diag,
            CurvatureKind::BlockKfac,
            CurvatureKind::BlockTriKfac,
            CurvatureKind::Identity,
        ] {
            let (net, post) = fitted(1, kind);
            assert_eq!(post.reg_value(&net).unwrap(), 0.0);
            for (_, ga, gb) in post.reg_grad(&net).unwrap() {
                assert_eq!(ga.max_abs(), 0.0);
                assert_eq!(gb.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn identity_penalty_is_squared_distance() {
        let (mut net, post) = fitted(2, CurvatureKind::Identity);
        let a0 = net.adapters()[0].a.clone();
        let mut a1 = a0.clone();
        a1.set(0, 0, a0.get(0, 0) + 0.5);
        a1.set(1, 2, a0.get(1, 2) - 0.25);
        net.adapters_mut()[0].a = a1;
        let b0 = net.adapters()[1].b.clone();
        let mut b1 = b0.clone();
        b1.set(2, 0, b0.get(2, 0) + 1.0);
        net.adapters_mut()[1].b = b1;
        assert_eq!(post.reg_value(&net).unwrap(), 0.25 + 0.0625 + 1.0);
        let grads = post.reg_grad(&net).unwrap();
        assert_eq!(grads[0].1.get(0, 0), 1.0);
        assert_eq!(grads[0].1.get(1, 2), -0.5);
        assert_eq!(grads[1].2.get(2, 0), 2.0);
    }

    #[test]
    fn diag_penalty_hand_check() {
        // Rank-1 adapter on a 1 -> 1 layer: every quantity is a scalar.
        let post = AdapterPosterior {
            layer_index: 0,
            mu_a: Matrix::zeros(1, 1),
            mu_b: Matrix::zeros(1, 1),
            curvature: AdapterCurvature::Diag(DiagPrecision {
                d_a: vec![3.0],
                d_b: vec![2.0],
            }),
        };
        let dev_a = Matrix::from_rows(&[vec![0.5]]);
        let dev_b = Matrix::from_rows(&[vec![-1.0]]);
        assert_eq!(post.value(&dev_a, &dev_b).unwrap(), 3.0 * 0.25 + 2.0);
        let (ga, gb) = post.grad(&dev_a, &dev_b).unwrap();
        assert_eq!(ga.get(0, 0), 3.0);
        assert_eq!(gb.get(0, 0), -4.0);
    }

    #[test]
    fn kfac_value_matches_materialized_kron() {
        for kind in [CurvatureKind::BlockKfac, CurvatureKind::BlockTriKfac] {
            let (mut net, post) = fitted(3, kind);
            perturb(&mut net, 33, 0.1);
            let got = post.reg_value(&net).unwrap();
            let mut want = 0.0;
            for (p, dev_a, dev_b) in post.deviations(&net).unwrap() {
                let AdapterCurvature::Kfac(f) = &p.curvature else { panic!("expected kfac") };
                let va = vec_mat(&dev_a);
                let vb = vec_mat(&dev_b);
                let quad = |m: &Matrix, x: &Vector, y: &Vector| {
                    let mut s = 0.0;
                    for i in 0..x.len() {
                        for j in 0..y.len() {
                            s += x.data[i] * m.get(i, j) * y.data[j];
                        }
                    }
                    s
                };
                want += quad(&kron(&f.l00, &f.r11).unwrap(), &va, &va);
                want += quad(&kron(&f.l11, &f.r22).unwrap(), &vb, &vb);
                if let (Some(l01), Some(r12)) = (&f.l01, &f.r12) {
                    want += 2.0 * quad(&kron(l01, r12).unwrap(), &va, &vb);
                }
            }
            let scale = want.abs().max(1.0);
            assert!((got - want).abs() <= 1e-12 * scale, "{kind:?}: {got} vs {want}");
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        // The penalty is exactly quadratic, so central differences are
        // exact up to rounding.
        for kind in [
            CurvatureKind::Diag,
            CurvatureKind::BlockKfac,
            CurvatureKind::BlockTriKfac,
            CurvatureKind::Identity,
        ] {
            let (mut net, post) = fitted(4, kind);
            perturb(&mut net, 44, 0.2);
            let grads = post.reg_grad(&net).unwrap();
            let h = 1e-4;
            for (gi, ad_post) in post.adapters.iter().enumerate() {
                let layer = ad_post.layer_index;
                for (side, (rows, cols)) in [(0usize, grads[gi].1.shape()), (1, grads[gi].2.shape())]
                {
                    for i in 0..rows {
                        for j in 0..cols {
                            let read = |n: &Network| post.reg_value(n).unwrap();
                            let mut plus = net.clone();
                            let mut minus = net.clone();
                            {
                                let ad = plus.layers[layer].adapter.as_mut().unwrap();
                                let m = if side == 0 { &mut ad.a } else { &mut ad.b };
                                m.set(i, j, m.get(i, j) + h);
                            }
                            {
                                let ad = minus.layers[layer].adapter.as_mut().unwrap();
                                let m = if side == 0 { &mut ad.a } else { &mut ad.b };
                                m.set(i, j, m.get(i, j) - h);
                            }
                            let fd = (read(&plus) - read(&minus)) / (2.0 * h);
                            let an = if side == 0 {
                                grads[gi].1.get(i, j)
                            } else {
                                grads[gi].2.get(i, j)
                            };
                            assert!(
                                (fd - an).abs() <= 1e-7 * an.abs().max(1.0),
                                "{kind:?} layer {layer} side {side} ({i},{j}): fd {fd} vs {an}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn cross_term_is_symmetric() {
        let (mut net, post) = fitted(5, CurvatureKind::BlockTriKfac);
        perturb(&mut net, 55, 0.3);
        let terms = post.cross_term_symmetric(&net).unwrap();
        assert_eq!(terms.len(), 2);
        for (t1, t2) in terms {
            assert!((t1 - t2).abs() <= 1e-12 * t1.abs().max(1.0), "{t1} vs {t2}");
        }
    }

    #[test]
    fn cross_block_changes_the_penalty() {
        let (mut net_b, post_b) = fitted(6, CurvatureKind::BlockKfac);
        let (_, post_t) = fitted(6, CurvatureKind::BlockTriKfac);
        perturb(&mut net_b, 66, 0.2);
        let vb = post_b.reg_value(&net_b).unwrap();
        let vt = post_t.reg_value(&net_b).unwrap();
        assert!((vb - vt).abs() > 1e-8, "cross term should move the value");
    }

    #[test]
    fn deltaw_cov_diag_hand_check() {
        // r = 1, 2 -> 2: Cov(DeltaW[p,q], DeltaW[p,q]) = 1/(d_b[p] d_a[q]).
        let post = AdapterPosterior {
            layer_index: 0,
            mu_a: Matrix::zeros(1, 2),
            mu_b: Matrix::zeros(2, 1),
            curvature: AdapterCurvature::Diag(DiagPrecision {
                d_a: vec![2.0, 5.0],
                d_b: vec![4.0, 10.0],
            }),
        };
        assert_eq!(deltaw_cov_diag(&post, (0, 0), (0, 0)).unwrap(), (1.0 / 4.0) * (1.0 / 2.0));
        assert_eq!(deltaw_cov_diag(&post, (1, 1), (1, 1)).unwrap(), (1.0 / 10.0) * (1.0 / 5.0));
        assert_eq!(deltaw_cov_diag(&post, (0, 0), (1, 1)).unwrap(), 0.0);
        assert_eq!(deltaw_cov_diag(&post, (0, 1), (0, 0)).unwrap(), 0.0);
        assert!(deltaw_cov_diag(&post, (2, 0), (0, 0)).is_err());
    }

    #[test]
    fn deltaw_cov_zero_precision_is_singular() {
        let post = AdapterPosterior {
            layer_index: 0,
            mu_a: Matrix::zeros(1, 1),
            mu_b: Matrix::zeros(1, 1),
            curvature: AdapterCurvature::Diag(DiagPrecision {
                d_a: vec![0.0],
                d_b: vec![1.0],
            }),
        };
        let err = deltaw_cov_diag(&post, (0, 0), (0, 0)).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Singular);
    }

    #[test]
    fn collapse_identity_factors_gives_rank_scalar() {
        let r = 3;
        let post = AdapterPosterior {
            layer_index: 0,
            mu_a: Matrix::zeros(r, 4),
            mu_b: Matrix::zeros(5, r),
            curvature: AdapterCurvature::Kfac(KfacFactors {
                l00: Matrix::identity(4),
                r11: Matrix::identity(r),
                l11: Matrix::identity(r),
                r22: Matrix::identity(5),
                l01: None,
                r12: None,
            }),
        };
        let c = bkfac_collapse_scalar(&post).unwrap();
        assert_eq!(c.scalar, r as f64);
        assert_eq!(c.cov((1, 2), (1, 2)), r as f64);
        assert_eq!(c.cov((1, 2), (0, 2)), 0.0);
    }

    #[test]
    fn collapse_rank_one_is_a_single_product() {
        let one = |v: f64| Matrix::from_rows(&[vec![v]]);
        let post = AdapterPosterior {
            layer_index: 0,
            mu_a: Matrix::zeros(1, 1),
            mu_b: Matrix::zeros(1, 1),
            curvature: AdapterCurvature::Kfac(KfacFactors {
                l00: one(8.0),
                r11: one(5.0),
                l11: one(2.0),
                r22: one(4.0),
                l01: None,
                r12: None,
            }),
        };
        let c = bkfac_collapse_scalar(&post).unwrap();
        assert_eq!(c.scalar, 1.0 / 10.0);
        assert_eq!(c.cov((0, 0), (0, 0)), (1.0 / 10.0) * (1.0 / 8.0) * (1.0 / 4.0));
    }

    #[test]
    fn collapse_rejects_other_kinds() {
        let (_, diag_post) = fitted(7, CurvatureKind::Diag);
        assert_eq!(
            bkfac_collapse_scalar(&diag_post.adapters[0]).unwrap_err().kind,
            ErrorKind::Contract
        );
        let (_, tri_post) = fitted(7, CurvatureKind::BlockTriKfac);
        assert_eq!(
            bkfac_collapse_scalar(&tri_post.adapters[0]).unwrap_err().kind,
            ErrorKind::Contract
        );
    }

    #[test]
    fn mean_is_a_snapshot() {
        let (mut net, post) = fitted(8, CurvatureKind::Identity);
        let mu = post.adapters[0].mu_a.clone();
        perturb(&mut net, 88, 0.5);
        assert_eq!(post.adapters[0].mu_a, mu);
        assert!(post.reg_value(&net).unwrap() > 0.0);
    }

    #[test]
    fn layout_mismatch_is_a_contract_error() {
        let (_, post) = fitted(9, CurvatureKind::Diag);
        let mut other = init_network(&[5, 6], 3, 9).unwrap();
        attach_lora(&mut other, &[1], 2, 4.0, 0.0, 10).unwrap();
        assert_eq!(post.reg_value(&other).unwrap_err().kind, ErrorKind::Contract);
    }

    #[test]
    fn estimate_count_mismatch_is_rejected() {
        let (net, post) = fitted(10, CurvatureKind::Identity);
        let est = CurvatureEstimate {
            kind: CurvatureKind::Identity,
            adapters: vec![AdapterCurvature::Identity(AdapterDims {
                rank: 2,
                d_in: 5,
                d_out: 6,
            })],
            provenance: crate::curvature::Provenance {
                subdataset_count: 1,
                batches_per_subdataset: 1,
                batch_size: 1,
                descriptors: vec![],
            },
        };
        assert!(LaplacePosterior::from_estimate(&net, &est).is_err());
        drop(post);
    }
}
