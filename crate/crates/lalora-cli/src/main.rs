//! Command-line driver: pretrain a base network, fit source curvature,
//! fine-tune under a quadratic penalty, sweep a grid, score the results,
//! and cross-check the fast paths against slow reference implementations.
//!
//! Every output file is written atomically and is byte-deterministic in
//! the config, so rerunning a command reproduces its outputs exactly.
//! Exit codes: 2 rejected input, 3 numerical failure, 4 I/O failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use lalora_core::checkpoint::{
    network_from_checkpoint, network_tensors, posterior_from_checkpoint, posterior_tensors,
    read_file, write_atomic, Checkpoint,
};
use lalora_core::config::RunConfig;
use lalora_core::curvature::{
    fit_curvature, AdapterCurvature, AdapterDims, CurvatureKind, DiagPrecision, KfacFactors,
    LaplaceConfig,
};
use lalora_core::error::{Error, Result};
use lalora_core::harness::{
    costs_csv, fmt_float, group_analysis, groups_csv, history_csv, history_filename, pareto_csv,
    pareto_frontier, records_csv, records_from_json, records_json, score_sb, scores_csv, sweep,
    SweepInputs, SweepRecord,
};
use lalora_core::linalg::{inverse, kron, Matrix};
use lalora_core::model::{attach_lora, backward, forward, init_network, nll_loss, Mode, Network};
use lalora_core::oracle::{
    dense_fisher, dense_from_curvature, dense_quadform, finite_diff_adapter_grads,
    mc_deltaw_cov, stack_adapter_grad, DiagSampler,
};
use lalora_core::posterior::{
    bkfac_collapse_scalar, deltaw_cov_diag, AdapterPosterior, LaplacePosterior,
};
use lalora_core::tasks::{Batch, LabeledDataset, Suite};
use lalora_core::training::{evaluate_accuracy, finetune, pretrain, FinetuneData};

#[derive(Parser)]
#[command(
    name = "lalora",
    version,
    about = "Laplace-regularized low-rank adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base network on the source tasks and save it.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach adapters, fit source curvature, save network plus posterior.
    FitLaplace {
        #[arg(long)]
        config: PathBuf,
        /// Adapter-free base checkpoint from `pretrain`.
        #[arg(long)]
        base: PathBuf,
        /// diag, block-kfac, block-tri-kfac, or identity.
        #[arg(long)]
        kind: String,
        /// Adapter attachment seed; defaults to the first config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on the target task under the stored posterior.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint from `fit-laplace`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lambda: f64,
        /// Shuffle/dropout seed; defaults to the first config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Run the whole (curvature, lambda, seed) grid and write CSV/JSON.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Adapter-free base checkpoint from `pretrain`.
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Worker threads. Defaults to LALORA_THREADS, then to the
        /// available parallelism. The output never depends on this.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score a sweep: balanced score, chosen lambdas, Pareto frontier.
    Analyze {
        /// records.json written by `sweep`.
        #[arg(long)]
        records: PathBuf,
        /// Defaults to the directory holding the records file.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        /// Diagonal posterior checkpoint; adds a precision-group report.
        #[arg(long, requires = "model")]
        posterior: Option<PathBuf>,
        /// Fine-tuned model checkpoint matching --posterior.
        #[arg(long, requires = "posterior")]
        model: Option<PathBuf>,
    },
    /// Cross-check fast paths against slow reference implementations.
    OracleCheck {
        #[arg(long)]
        config: PathBuf,
        /// Monte Carlo draws for the sampler check; multiple of 100.
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { config, out } => cmd_pretrain(&config, &out),
        Command::FitLaplace { config, base, kind, seed, out } => {
            cmd_fit_laplace(&config, &base, &kind, seed, &out)
        }
        Command::Train { config, checkpoint, lambda, seed, out_dir } => {
            cmd_train(&config, &checkpoint, lambda, seed, &out_dir)
        }
        Command::Sweep { config, base, out_dir, threads } => {
            cmd_sweep(&config, &base, &out_dir, threads)
        }
        Command::Analyze { records, out_dir, posterior, model } => {
            cmd_analyze(&records, out_dir, posterior, model)
        }
        Command::OracleCheck { config, samples } => cmd_oracle_check(&config, samples),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::io(format!("creating {}: {e}", path.display()), e))
}

fn source_trains(suite: &Suite) -> Vec<&LabeledDataset> {
    suite.sources.iter().map(|t| &t.train).collect()
}

fn cmd_pretrain(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let suite = cfg.suite()?;
    let mut net = init_network(&cfg.model.dims, cfg.model.num_classes, cfg.model.seed)?;
    let parts = source_trains(&suite);
    let data = LabeledDataset::concat(&parts)?;
    let history = pretrain(&mut net, &data, &cfg.pretrain_config())?;
    for (epoch, nll) in &history {
        println!("epoch {epoch} train_nll {}", fmt_float(*nll));
    }
    for (i, task) in suite.sources.iter().enumerate() {
        println!("source_{i}_acc {}", fmt_float(evaluate_accuracy(&net, &task.eval)?));
    }
    println!("target_acc {}", fmt_float(evaluate_accuracy(&net, &suite.target.eval)?));
    let ck = Checkpoint { tensors: network_tensors(&net, Some(&cfg.canonical_hash())) };
    write_atomic(out, &ck.to_bytes()?)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_fit_laplace(
    config: &Path,
    base: &Path,
    kind: &str,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let kind = CurvatureKind::parse(kind)?;
    let suite = cfg.suite()?;
    let mut net = network_from_checkpoint(&load_checkpoint(base)?)?;
    if !net.adapter_layers().is_empty() {
        return Err(Error::contract("the base checkpoint must be adapter-free"));
    }
    let seed = seed.unwrap_or_else(|| cfg.seeds()[0]);
    attach_lora(
        &mut net,
        &cfg.lora.layers,
        cfg.lora.rank,
        cfg.lora.alpha,
        cfg.lora.dropout_p,
        seed,
    )?;
    let sources = source_trains(&suite);
    let est = fit_curvature(&net, &sources, &cfg.laplace_config(kind))?;
    let post = LaplacePosterior::from_estimate(&net, &est)?;
    let mut ck = Checkpoint { tensors: network_tensors(&net, Some(&cfg.canonical_hash())) };
    for t in posterior_tensors(&post, Some(&est.provenance)) {
        ck.push(t);
    }
    write_atomic(out, &ck.to_bytes()?)?;
    let stored: usize = est.adapters.iter().map(|a| a.stored_values()).sum();
    println!(
        "kind {} adapters {} stored_values {stored} attach_seed {seed}",
        kind.as_str(),
        est.adapters.len(),
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(
    config: &Path,
    checkpoint: &Path,
    lambda: f64,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let suite = cfg.suite()?;
    let ck = load_checkpoint(checkpoint)?;
    let mut net = network_from_checkpoint(&ck)?;
    let post = posterior_from_checkpoint(&ck)?;
    let seed = seed.unwrap_or_else(|| cfg.seeds()[0]);
    let source_evals: Vec<&LabeledDataset> = suite.sources.iter().map(|t| &t.eval).collect();
    let data = FinetuneData {
        train: &suite.target.train,
        target_eval: &suite.target.eval,
        source_evals: &source_evals,
    };
    let passed = if lambda > 0.0 { Some(&post) } else { None };
    let history = finetune(&mut net, passed, lambda, data, &cfg.train_config(seed))?;
    let first = history.first().expect("history is never empty");
    let last = history.last().expect("history is never empty");
    let record = SweepRecord {
        kind: post.kind,
        lambda,
        seed,
        pretrained_target_acc: first.target_acc,
        pretrained_source_acc_mean: first.source_acc_mean(),
        final_target_acc: last.target_acc,
        final_source_acc_mean: last.source_acc_mean(),
        learning_pp: 100.0 * last.target_acc - 100.0 * first.target_acc,
        forgetting_pp: 100.0 * first.source_acc_mean() - 100.0 * last.source_acc_mean(),
        final_reg_value: if lambda > 0.0 { last.reg_value } else { post.reg_value(&net)? },
        final_train_loss: last.train_loss,
        history: history.clone(),
    };
    ensure_dir(out_dir)?;
    let csv_path = out_dir.join(history_filename(&record));
    write_atomic(&csv_path, history_csv(&record).as_bytes())?;
    let model_path = out_dir.join(format!(
        "model_{}_{}_{}.ckpt",
        record.kind.as_str(),
        record.lambda,
        record.seed
    ));
    let mut model_ck = Checkpoint { tensors: network_tensors(&net, Some(&cfg.canonical_hash())) };
    for t in posterior_tensors(&post, None) {
        model_ck.push(t);
    }
    write_atomic(&model_path, &model_ck.to_bytes()?)?;
    println!(
        "kind {} lambda {} seed {} target_acc {} source_acc_mean {} learning_pp {} forgetting_pp {}",
        record.kind.as_str(),
        record.lambda,
        record.seed,
        fmt_float(record.final_target_acc),
        fmt_float(record.final_source_acc_mean),
        fmt_float(record.learning_pp),
        fmt_float(record.forgetting_pp),
    );
    println!("wrote {}", csv_path.display());
    println!("wrote {}", model_path.display());
    Ok(())
}

fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("LALORA_THREADS") {
            Ok(v) => v.trim().parse::<usize>().map_err(|_| {
                Error::validation(format!("LALORA_THREADS must be a positive integer, got '{v}'"))
            })?,
            Err(std::env::VarError::NotPresent) => {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            }
            Err(e) => return Err(Error::validation(format!("LALORA_THREADS: {e}"))),
        },
    };
    if n == 0 {
        return Err(Error::validation("thread count must be at least 1"));
    }
    Ok(n)
}

fn cmd_sweep(config: &Path, base: &Path, out_dir: &Path, threads: Option<usize>) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let suite = cfg.suite()?;
    let base_net = network_from_checkpoint(&load_checkpoint(base)?)?;
    let threads = resolve_threads(threads)?;
    let laplace = cfg.laplace_config(cfg.kinds()?[0]);
    let train_cfg = cfg.train_config(0);
    let inputs = SweepInputs {
        suite: &suite,
        base: &base_net,
        adapter_layers: &cfg.lora.layers,
        rank: cfg.lora.rank,
        alpha: cfg.lora.alpha,
        dropout_p: cfg.lora.dropout_p,
        laplace: &laplace,
        train: &train_cfg,
    };
    let records = sweep(&inputs, &cfg.plan()?, threads)?;
    ensure_dir(out_dir)?;
    write_atomic(&out_dir.join("records.csv"), records_csv(&records)?.as_bytes())?;
    write_atomic(&out_dir.join("records.json"), records_json(&records)?.as_bytes())?;
    for r in &records {
        write_atomic(&out_dir.join(history_filename(r)), history_csv(r).as_bytes())?;
        println!(
            "{} lambda {} seed {} target_acc {} source_acc_mean {}",
            r.kind.as_str(),
            r.lambda,
            r.seed,
            fmt_float(r.final_target_acc),
            fmt_float(r.final_source_acc_mean),
        );
    }
    println!("cells {}", records.len());
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn cmd_analyze(
    records_path: &Path,
    out_dir: Option<PathBuf>,
    posterior: Option<PathBuf>,
    model: Option<PathBuf>,
) -> Result<()> {
    let text = std::fs::read_to_string(records_path)
        .map_err(|e| Error::io(format!("reading {}: {e}", records_path.display()), e))?;
    let records = records_from_json(&text)?;
    let scores = score_sb(&records)?;
    let frontier = pareto_frontier(&records)?;
    let out_dir = out_dir.unwrap_or_else(|| {
        records_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    });
    ensure_dir(&out_dir)?;
    write_atomic(&out_dir.join("scores.csv"), scores_csv(&scores)?.as_bytes())?;
    write_atomic(&out_dir.join("pareto.csv"), pareto_csv(&frontier)?.as_bytes())?;
    for m in &scores {
        println!(
            "{}: lambda_stability {} lambda_plasticity {}",
            m.kind.as_str(),
            m.lambda_stability,
            m.lambda_plasticity
        );
        for row in &m.rows {
            println!(
                "  lambda {} target_acc {} source_acc {} s_b {}",
                row.lambda,
                fmt_float(row.mean_target_acc),
                fmt_float(row.mean_source_acc),
                fmt_float(row.s_b),
            );
        }
    }
    println!("pareto_points {}", frontier.len());
    for p in &frontier {
        println!(
            "  {} lambda {} learning_pp {} forgetting_pp {}",
            p.kind.as_str(),
            p.lambda,
            fmt_float(p.learning_pp),
            fmt_float(p.forgetting_pp),
        );
    }
    if let (Some(ppath), Some(mpath)) = (posterior, model) {
        let post = posterior_from_checkpoint(&load_checkpoint(&ppath)?)?;
        let net = network_from_checkpoint(&load_checkpoint(&mpath)?)?;
        let report = group_analysis(&post, &net)?;
        println!("groups p60 {} p90 {}", fmt_float(report.p60), fmt_float(report.p90));
        for (name, idx) in [("flexible", 0), ("moderate", 1), ("important", 2)] {
            println!(
                "  {name} n {} mean_abs_dev {}",
                report.counts[idx],
                fmt_float(report.mean_abs_dev[idx]),
            );
        }
        write_atomic(&out_dir.join("groups.csv"), groups_csv(&report).as_bytes())?;
        let dims: Vec<(usize, AdapterDims)> = net
            .adapter_layers()
            .into_iter()
            .zip(net.adapters())
            .map(|(layer, ad)| {
                (layer, AdapterDims { rank: ad.rank(), d_in: ad.d_in(), d_out: ad.d_out() })
            })
            .collect();
        write_atomic(&out_dir.join("costs.csv"), costs_csv(&dims)?.as_bytes())?;
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

/// Deterministic, nonzero adapter perturbation so checked quantities do
/// not vanish at the inert initialization.
fn perturb_adapters(net: &mut Network, scale: f64, phase: u64) {
    let mut c = phase as f64;
    for ad in net.adapters_mut() {
        for m in [&mut ad.a, &mut ad.b] {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    c += 1.0;
                    m.set(i, j, m.get(i, j) + scale * (0.3 * c).sin());
                }
            }
        }
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

struct CheckReporter {
    index: usize,
}

impl CheckReporter {
    fn pass(&mut self, name: &str, err: f64) {
        self.index += 1;
        println!("check {} ({name}): PASS (max err {err:.3e})", self.index);
    }
}

fn adapter_deviations(net: &Network, post: &LaplacePosterior) -> Vec<(Matrix, Matrix)> {
    post.adapters
        .iter()
        .map(|ap| {
            let ad = net.layers[ap.layer_index].adapter.as_ref().expect("adapted layer");
            (ad.a.sub(&ap.mu_a), ad.b.sub(&ap.mu_b))
        })
        .collect()
}

fn cmd_oracle_check(config: &Path, samples: usize) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let suite = cfg.suite()?;
    let sources = source_trains(&suite);
    let mut net = init_network(&cfg.model.dims, cfg.model.num_classes, cfg.model.seed)?;
    attach_lora(
        &mut net,
        &cfg.lora.layers,
        cfg.lora.rank,
        cfg.lora.alpha,
        cfg.lora.dropout_p,
        cfg.seeds()[0],
    )?;
    perturb_adapters(&mut net, 0.05, 1);
    let mut rep = CheckReporter { index: 0 };

    // Factored penalty against a materialized dense quadratic form.
    {
        let mut worst = 0.0f64;
        for kind in cfg.kinds()? {
            let est = fit_curvature(&net, &sources, &cfg.laplace_config(kind))?;
            let post = LaplacePosterior::from_estimate(&net, &est)?;
            let mut moved = net.clone();
            perturb_adapters(&mut moved, 0.02, 2);
            let fast = post.reg_value(&moved)?;
            let mut slow = 0.0;
            for (curv, (dev_a, dev_b)) in
                est.adapters.iter().zip(adapter_deviations(&moved, &post))
            {
                let dense = dense_from_curvature(curv, cfg.lora.rank)?;
                let u = stack_adapter_grad(&dev_a, &dev_b);
                slow += dense_quadform(&dense, &u, &u)?;
            }
            let err = rel_err(fast, slow);
            if err > 1e-10 {
                return Err(Error::numeric(format!(
                    "penalty mismatch for {}: fast {fast} dense {slow}",
                    kind.as_str()
                )));
            }
            worst = worst.max(err);
        }
        rep.pass("factored penalty matches dense assembly", worst);
    }

    // One-sample factored curvature against the exact dense Fisher.
    {
        let one = LabeledDataset {
            inputs: Matrix::from_row_major(
                1,
                suite.sources[0].train.dim(),
                suite.sources[0].train.inputs.row(0).to_vec(),
            ),
            labels: vec![suite.sources[0].train.labels[0]],
        };
        let est = fit_curvature(
            &net,
            &[&one],
            &LaplaceConfig {
                kind: CurvatureKind::BlockTriKfac,
                batches_per_subdataset: 1,
                batch_size: 1,
                per_example: false,
                seed: 0,
            },
        )?;
        let batch = Batch { inputs: one.inputs.clone(), labels: one.labels.clone() };
        let fishers = dense_fisher(&net, &batch)?;
        let mut worst = 0.0f64;
        for (curv, fisher) in est.adapters.iter().zip(&fishers) {
            let dense = dense_from_curvature(curv, cfg.lora.rank)?;
            let span = fisher.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            for (a, b) in dense.as_slice().iter().zip(fisher.as_slice()) {
                let err = (a - b).abs() / span;
                if err > 1e-10 {
                    return Err(Error::numeric(format!(
                        "one-sample curvature disagrees with the dense Fisher by {err:.3e}"
                    )));
                }
                worst = worst.max(err);
            }
        }
        rep.pass("one-sample factored curvature equals the dense Fisher", worst);
    }

    // Analytic gradient of the total loss against central differences.
    {
        let lambda = 1.0;
        let est = fit_curvature(
            &net,
            &sources,
            &cfg.laplace_config(CurvatureKind::BlockTriKfac),
        )?;
        let post = LaplacePosterior::from_estimate(&net, &est)?;
        let mut moved = net.clone();
        perturb_adapters(&mut moved, 0.02, 3);
        let n = suite.target.train.len().min(64);
        let inputs = Matrix::from_fn(n, suite.target.train.dim(), |i, j| {
            suite.target.train.inputs.get(i, j)
        });
        let labels = suite.target.train.labels[..n].to_vec();
        let mut loss = |candidate: &Network| -> Result<f64> {
            let trace = forward(candidate, &inputs, Mode::Eval, None)?;
            Ok(nll_loss(&trace.logits, &labels)? + lambda * post.reg_value(candidate)?)
        };
        // h = 1e-5: the unpretrained base can have saturated logits whose
        // third derivative makes 1e-4 truncation exceed the tolerance.
        let fd = finite_diff_adapter_grads(&moved, &mut loss, 1e-5)?;
        let mut trace = forward(&moved, &inputs, Mode::Eval, None)?;
        let grads = backward(&moved, &mut trace, &labels)?;
        let reg = post.reg_grad(&moved)?;
        let mut worst = 0.0f64;
        for ((li, fa, fb), ((gi, ga, gb), (ri, ra, rb))) in
            fd.iter().zip(grads.adapters.iter().zip(&reg))
        {
            if li != gi || li != ri {
                return Err(Error::contract("gradient layer order mismatch"));
            }
            for (f, (g, r)) in [
                (fa, (ga, ra)),
                (fb, (gb, rb)),
            ] {
                for (fv, (gv, rv)) in f
                    .as_slice()
                    .iter()
                    .zip(g.as_slice().iter().zip(r.as_slice()))
                {
                    let analytic = gv + lambda * rv;
                    let err = (fv - analytic).abs();
                    let tol = 1e-6 + 1e-4 * analytic.abs();
                    if err > tol {
                        return Err(Error::numeric(format!(
                            "finite differences disagree with the analytic gradient: \
                             {fv} vs {analytic}"
                        )));
                    }
                    worst = worst.max(err / (analytic.abs().max(1.0)));
                }
            }
        }
        rep.pass("analytic total-loss gradient matches finite differences", worst);
    }

    // Diagonal sampler covariance against the closed form, within 5 SE.
    {
        if samples == 0 || samples % 100 != 0 {
            return Err(Error::validation("--samples must be a positive multiple of 100"));
        }
        let (rank, d_in, d_out) = (2usize, 5usize, 4usize);
        let d_a: Vec<f64> = (0..rank * d_in).map(|i| 1.0 + 0.35 * i as f64).collect();
        let d_b: Vec<f64> = (0..rank * d_out).map(|i| 2.0 + 0.5 * i as f64).collect();
        let sampler = DiagSampler::new(&d_a, &d_b, rank, d_in, d_out)?;
        let post = AdapterPosterior {
            layer_index: 0,
            mu_a: Matrix::zeros(rank, d_in),
            mu_b: Matrix::zeros(d_out, rank),
            curvature: AdapterCurvature::Diag(DiagPrecision { d_a, d_b }),
        };
        let pairs = [
            ((0, 0), (0, 0)),
            ((1, 2), (1, 2)),
            ((3, 4), (3, 4)),
            ((0, 0), (1, 0)),
            ((2, 1), (3, 4)),
        ];
        let mc = mc_deltaw_cov(&mut |rng| sampler.draw(rng), &pairs, samples, 100, 4242)?;
        let mut worst = 0.0f64;
        for (pair, est) in pairs.iter().zip(&mc) {
            let closed = deltaw_cov_diag(&post, pair.0, pair.1)?;
            let err = (est.estimate - closed).abs();
            if err > 5.0 * est.std_error + 1e-12 {
                return Err(Error::numeric(format!(
                    "sampled covariance {} is {err:.3e} from the closed form {closed} \
                     (5 SE = {:.3e})",
                    est.estimate,
                    5.0 * est.std_error
                )));
            }
            worst = worst.max(err);
        }
        rep.pass("sampled covariance sits within 5 SE of the closed form", worst);
    }

    // Collapsed Kronecker covariance against the expanded double sum.
    {
        let (rank, d_in, d_out) = (2usize, 5usize, 4usize);
        let pd = |n: usize, base: f64| {
            Matrix::from_fn(n, n, |i, j| {
                if i == j {
                    base + i as f64
                } else {
                    0.1 / (1.0 + (i + j) as f64)
                }
            })
        };
        let f = KfacFactors {
            l00: pd(d_in, 1.5),
            r11: pd(rank, 2.0),
            l11: pd(rank, 1.0),
            r22: pd(d_out, 2.5),
            l01: None,
            r12: None,
        };
        let post = AdapterPosterior {
            layer_index: 0,
            mu_a: Matrix::zeros(rank, d_in),
            mu_b: Matrix::zeros(d_out, rank),
            curvature: AdapterCurvature::Kfac(f.clone()),
        };
        let collapsed = bkfac_collapse_scalar(&post)?;
        // Slow route: Cov(DeltaW_pq, DeltaW_kl) expanded over the entry
        // covariances of A and B.
        let cov_a = kron(&inverse(&f.l00)?, &inverse(&f.r11)?)?;
        let cov_b = kron(&inverse(&f.l11)?, &inverse(&f.r22)?)?;
        let mut worst = 0.0f64;
        for p in 0..d_out {
            for q in 0..d_in {
                for k in 0..d_out {
                    for l in 0..d_in {
                        let mut slow = 0.0;
                        for alpha in 0..rank {
                            for beta in 0..rank {
                                slow += cov_b.get(alpha * d_out + p, beta * d_out + k)
                                    * cov_a.get(q * rank + alpha, l * rank + beta);
                            }
                        }
                        let fast = collapsed.cov((p, q), (k, l));
                        let err = (fast - slow).abs();
                        if err > 1e-12 {
                            return Err(Error::numeric(format!(
                                "collapsed covariance ({p},{q}),({k},{l}): \
                                 {fast} vs expanded {slow}"
                            )));
                        }
                        worst = worst.max(err);
                    }
                }
            }
        }
        rep.pass("collapsed covariance matches the expanded double sum", worst);
    }

    println!("all checks passed");
    Ok(())
}
