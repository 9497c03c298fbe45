//! Property tests for the algebraic invariants the library leans on:
//! Kronecker identities, vec round trips, batch partitioning, precision
//! nonnegativity, penalty quadraticity, and serialization fidelity.

use proptest::prelude::*;

use lalora_core::checkpoint::{Checkpoint, Tensor};
use lalora_core::curvature::{fit_curvature, CurvatureKind, LaplaceConfig};
use lalora_core::harness::records_csv;
use lalora_core::harness::SweepRecord;
use lalora_core::linalg::{kron, kron_quadform, unvec, vec_mat, Matrix};
use lalora_core::model::{attach_lora, init_network, Network};
use lalora_core::oracle::dense_quadform;
use lalora_core::posterior::LaplacePosterior;
use lalora_core::tasks::{batches, generate_task, LabeledDataset, TaskSpec};
use lalora_core::training::{evaluate_accuracy, scheduled_lr, Schedule};

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-2.0..2.0f64, rows * cols)
        .prop_map(move |v| Matrix::from_row_major(rows, cols, v))
}

fn mat_pair_same_shape() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1..4usize, 1..4usize).prop_flat_map(|(r, c)| (mat(r, c), mat(r, c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kron_is_bilinear((x, x2) in mat_pair_same_shape(), y in (1..4usize, 1..4usize).prop_flat_map(|(r, c)| mat(r, c)), a in -3.0..3.0f64) {
        let scaled = kron(&x.scale(a), &y).unwrap();
        let reference = kron(&x, &y).unwrap().scale(a);
        for (u, v) in scaled.as_slice().iter().zip(reference.as_slice()) {
            prop_assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
        let summed = kron(&x.add(&x2), &y).unwrap();
        let expanded = kron(&x, &y).unwrap().add(&kron(&x2, &y).unwrap());
        for (u, v) in summed.as_slice().iter().zip(expanded.as_slice()) {
            prop_assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn factored_quadform_equals_materialized_kron(
        (l, r, x, y) in (1..4usize, 1..4usize, 1..4usize, 1..4usize)
            .prop_flat_map(|(a, b, c, d)| (mat(a, b), mat(c, d), mat(c, a), mat(d, b))),
    ) {
        let fast = kron_quadform(&l, &r, &x, &y).unwrap();
        let dense = kron(&l, &r).unwrap();
        let u = vec_mat(&x);
        let v = vec_mat(&y);
        let slow = dense_quadform(&dense, u.as_slice(), v.as_slice()).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1.0));
    }

    #[test]
    fn vec_round_trips(m in (1..6usize, 1..6usize).prop_flat_map(|(r, c)| mat(r, c))) {
        let v = vec_mat(&m);
        let back = unvec(&v, m.rows(), m.cols()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn batches_partition_the_dataset(
        n in 1..40usize,
        batch_size in 1..12usize,
        seed in any::<u64>(),
        epoch in 0..4u64,
    ) {
        // Batches larger than the dataset are rejected up front.
        let batch_size = batch_size.min(n);
        let data = LabeledDataset {
            inputs: Matrix::from_fn(n, 3, |i, j| (i * 3 + j) as f64),
            labels: (0..n).map(|i| i % 4).collect(),
        };
        let parts = batches(&data, batch_size, seed, epoch).unwrap();
        // Sizes: every batch full except possibly the last.
        let expected_batches = n.div_ceil(batch_size);
        prop_assert_eq!(parts.len(), expected_batches);
        for (i, p) in parts.iter().enumerate() {
            if i + 1 < parts.len() {
                prop_assert_eq!(p.len(), batch_size);
            } else {
                prop_assert_eq!(p.len(), n - batch_size * (parts.len() - 1));
            }
        }
        // Rows are a permutation: recover each row's original index from
        // its first feature.
        let mut seen = vec![false; n];
        for p in &parts {
            for r in 0..p.len() {
                let orig = (p.inputs.get(r, 0) as usize) / 3;
                prop_assert!(!seen[orig], "row {} appeared twice", orig);
                seen[orig] = true;
                prop_assert_eq!(p.labels[r], orig % 4);
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        // Same address, same batches.
        let again = batches(&data, batch_size, seed, epoch).unwrap();
        prop_assert_eq!(parts, again);
    }

    #[test]
    fn schedule_stays_in_bounds(
        base in 1e-6..1.0f64,
        total in 1..200usize,
        t in 0..200usize,
    ) {
        let t = t.min(total);
        prop_assert_eq!(scheduled_lr(base, Schedule::Constant, t, total), base);
        let decayed = scheduled_lr(base, Schedule::LinearDecay, t, total);
        prop_assert!(decayed >= 0.0 && decayed <= base);
        if t == 0 {
            prop_assert_eq!(decayed, base);
        }
    }

    #[test]
    fn checkpoints_round_trip_bitwise(
        tensors in proptest::collection::vec(
            (
                "[a-z][a-z0-9._]{0,12}",
                proptest::collection::vec(
                    prop_oneof![
                        -1e12..1e12f64,
                        Just(0.0),
                        Just(-0.0),
                        Just(f64::MIN_POSITIVE),
                        Just(f64::INFINITY),
                        Just(f64::NEG_INFINITY),
                    ],
                    0..12,
                ),
            ),
            0..6,
        )
    ) {
        let tensors: Vec<Tensor> = tensors
            .into_iter()
            .map(|(name, data)| Tensor {
                name,
                dims: vec![data.len() as u64],
                data,
            })
            .collect();
        let ck = Checkpoint { tensors };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

fn tiny_adapted_network(net_seed: u64, adapter_seed: u64) -> Network {
    let mut net = init_network(&[5, 7], 3, net_seed).unwrap();
    attach_lora(&mut net, &[0, 1], 2, 4.0, 0.0, adapter_seed).unwrap();
    // Move B off zero so every curvature block sees signal.
    for ad in net.adapters_mut() {
        for i in 0..ad.b.rows() {
            for j in 0..ad.b.cols() {
                ad.b.set(i, j, 0.05 * ((i + 2 * j + 1) as f64).sin());
            }
        }
    }
    net
}

fn tiny_task(seed: u64) -> LabeledDataset {
    generate_task(&TaskSpec {
        seed,
        dim: 5,
        classes: 3,
        samples: 30,
        eval_samples: 3,
        noise_scale: 0.5,
        rotation_seed: None,
    })
    .unwrap()
    .train
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn diagonal_precisions_are_nonnegative(
        net_seed in any::<u64>(),
        data_seed in any::<u64>(),
        per_example in any::<bool>(),
    ) {
        let net = tiny_adapted_network(net_seed, net_seed ^ 0x9E37);
        let data = tiny_task(data_seed);
        let est = fit_curvature(
            &net,
            &[&data],
            &LaplaceConfig {
                kind: CurvatureKind::Diag,
                batches_per_subdataset: 2,
                batch_size: 10,
                per_example,
                seed: data_seed,
            },
        )
        .unwrap();
        for curv in &est.adapters {
            match curv {
                lalora_core::curvature::AdapterCurvature::Diag(d) => {
                    prop_assert!(d.d_a.iter().chain(&d.d_b).all(|&v| v >= 0.0 && v.is_finite()));
                }
                other => prop_assert!(false, "unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn penalty_is_quadratic_and_nonnegative(
        net_seed in any::<u64>(),
        data_seed in any::<u64>(),
        t in -2.5..2.5f64,
        kind_idx in 0..4usize,
    ) {
        let kind = [
            CurvatureKind::Diag,
            CurvatureKind::BlockKfac,
            CurvatureKind::BlockTriKfac,
            CurvatureKind::Identity,
        ][kind_idx];
        let net = tiny_adapted_network(net_seed, net_seed ^ 0x517C);
        let data = tiny_task(data_seed);
        let est = fit_curvature(
            &net,
            &[&data],
            &LaplaceConfig {
                kind,
                batches_per_subdataset: 3,
                batch_size: 10,
                per_example: false,
                seed: data_seed,
            },
        )
        .unwrap();
        let post = LaplacePosterior::from_estimate(&net, &est).unwrap();
        // Deviation direction: deterministic in the net seed.
        let mut unit = net.clone();
        for ad in unit.adapters_mut() {
            for m in [&mut ad.a, &mut ad.b] {
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        m.set(i, j, m.get(i, j) + 0.1 * ((3 * i + j) as f64).cos());
                    }
                }
            }
        }
        let base = post.reg_value(&unit).unwrap();
        // Scale the deviation by t: theta = mu + t * dev.
        let mut scaled = net.clone();
        {
            let devs: Vec<(Matrix, Matrix)> = unit
                .adapters()
                .iter()
                .zip(net.adapters())
                .map(|(u, m)| (u.a.sub(&m.a), u.b.sub(&m.b)))
                .collect();
            for (ad, (da, db)) in scaled.adapters_mut().into_iter().zip(&devs) {
                ad.a.axpy(t, da);
                ad.b.axpy(t, db);
            }
        }
        let got = post.reg_value(&scaled).unwrap();
        let want = t * t * base;
        prop_assert!(
            (got - want).abs() <= 1e-9 * want.abs().max(1e-9),
            "kind {kind:?}: reg(t*dev) = {got}, t^2*reg(dev) = {want}"
        );
        if kind != CurvatureKind::BlockTriKfac {
            // Without the cross block the assembled form is PSD.
            prop_assert!(base >= 0.0, "kind {kind:?}: negative penalty {base}");
        }
    }

    #[test]
    fn accuracy_is_a_fraction(net_seed in any::<u64>(), data_seed in any::<u64>()) {
        let net = tiny_adapted_network(net_seed, net_seed ^ 0xAA);
        let data = tiny_task(data_seed);
        let acc = evaluate_accuracy(&net, &data).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert_eq!((acc * data.len() as f64).round(), acc * data.len() as f64);
    }

    #[test]
    fn records_csv_is_rectangular(
        n in 1..6usize,
        lambda in 0.0..100.0f64,
    ) {
        let records: Vec<SweepRecord> = (0..n)
            .map(|i| SweepRecord {
                kind: CurvatureKind::Diag,
                lambda,
                seed: i as u64,
                pretrained_target_acc: 0.2,
                pretrained_source_acc_mean: 0.7,
                final_target_acc: 0.5,
                final_source_acc_mean: 0.6,
                learning_pp: 30.0,
                forgetting_pp: 10.0,
                final_reg_value: 1.25,
                final_train_loss: 0.5,
                history: Vec::new(),
            })
            .collect();
        let csv = records_csv(&records).unwrap();
        prop_assert!(csv.ends_with("\r\n"));
        let lines: Vec<&str> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
        prop_assert_eq!(lines.len(), n + 1);
        let fields = lines[0].matches(',').count();
        for line in &lines {
            prop_assert_eq!(line.matches(',').count(), fields);
        }
    }
}
