use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use harmonic_core::checkpoint::{checkpoint_dtype, load_checkpoint};
use harmonic_core::config::{DatasetKind, RunConfig};
use harmonic_core::data::{self, balanced_subset, LabeledDataset, Split, SubsetSpec};
use harmonic_core::dct::{export_filters, FilterBank};
use harmonic_core::experiments::{
    run_stride_sweep, run_table2, sweep_strides, Arch, ShallowMode, Variant, SWEEP_HEADER, TABLE2_HEADER,
};
use harmonic_core::harmonic::{cost_report, Algorithm, HarmonicBlock, HarmonicSpec, Subset};
use harmonic_core::ops::Mode;
use harmonic_core::optim::LrSchedule;
use harmonic_core::train::{evaluate, MetricsRecord, TrainConfig, METRICS_HEADER};
use harmonic_core::verify::{run_all, VerifyOptions};
use harmonic_core::{DType, Error, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::{BenchArgs, Cli, Command, EvalArgs, Failure, FiltersArgs, StatsArgs, SweepArgs, Table2Args, TrainArgs, VerifyArgs};

type Outcome = Result<(), Failure>;

pub fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Filters(a) => filters(a, cli.json),
        Command::Verify(a) => verify(a, cli.json),
        Command::Train(a) => train(a, cli.json),
        Command::Eval(a) => eval(a, cli.json),
        Command::Table2(a) => table2(a, cli.json),
        Command::Stridesweep(a) => stridesweep(a, cli.json),
        Command::Bench(a) => bench(a, cli.json),
        Command::ComputeStats(a) => compute_stats(a, cli.json),
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn data_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(data::default_data_dir)
}

/// Appends per-epoch records to a CSV, writing the header first.
struct MetricsSink {
    file: Option<fs::File>,
}

impl MetricsSink {
    fn open(path: &Option<PathBuf>) -> Result<Self, Failure> {
        let file = match path {
            Some(p) => {
                let mut f = fs::File::create(p)?;
                writeln!(f, "{METRICS_HEADER}")?;
                Some(f)
            }
            None => None,
        };
        Ok(MetricsSink { file })
    }

    fn write(&mut self, r: &MetricsRecord) {
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{}", r.csv()).and_then(|_| f.flush());
        }
    }
}

fn filters(a: &FiltersArgs, json: bool) -> Outcome {
    let bank = FilterBank::new(a.size)?;
    let subset = match (a.lambda, a.truncate) {
        (Some(l), _) => bank.lambda_subset(l)?,
        (_, Some(t)) => bank.truncation_prefix(t)?,
        _ => bank.zigzag().to_vec(),
    };
    fs::create_dir_all(&a.out)?;
    let files = export_filters(&bank, &subset, &a.out)?;
    if json {
        print_json(&json!({
            "size": a.size,
            "filters": subset.iter().map(|p| json!({"u": p.u, "v": p.v})).collect::<Vec<_>>(),
            "files": files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>(),
        }));
    } else {
        println!("{} filters of size {k}x{k} -> {}", subset.len(), a.out.display(), k = a.size);
        println!("(u,v): {}", subset.iter().map(|p| format!("({},{})", p.u, p.v)).collect::<Vec<_>>().join(" "));
        for f in &files {
            println!("  {}", f.display());
        }
    }
    Ok(())
}

fn verify(a: &VerifyArgs, json: bool) -> Outcome {
    if a.max_n < 2 {
        return Err(Failure::Usage("--max-n must be >= 2".into()));
    }
    if !(a.tol >= 0.0) {
        return Err(Failure::Usage("--tol must be >= 0".into()));
    }
    let opts = VerifyOptions { max_n: a.max_n, tol: a.tol, seed: a.seed, equivalence_configs: a.configs };
    let suites = run_all(&opts)?;
    let ok = suites.iter().all(|s| s.passed());
    if json {
        print_json(&json!({
            "passed": ok,
            "suites": suites.iter().map(|s| json!({
                "name": s.name,
                "passed": s.passed(),
                "cases": s.cases,
                "failures": s.failures,
                "max_error": s.max_error,
                "tol": s.tol,
                "worst_case": s.detail,
            })).collect::<Vec<_>>(),
        }));
    } else {
        println!("{:<28} {:>8} {:>8} {:>12} {:>10}  result", "suite", "cases", "failed", "max_error", "tol");
        for s in &suites {
            println!(
                "{:<28} {:>8} {:>8} {:>12.3e} {:>10.1e}  {}",
                s.name,
                s.cases,
                s.failures,
                s.max_error,
                s.tol,
                if s.passed() { "PASS" } else { "FAIL" }
            );
            if !s.passed() {
                println!("    worst: {}", s.detail);
            }
        }
    }
    if ok {
        Ok(())
    } else {
        let failed: Vec<_> = suites.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
        Err(Failure::Verification(format!("failed suites: {}", failed.join(", "))))
    }
}

fn train(a: &TrainArgs, json: bool) -> Outcome {
    let cfg = RunConfig::from_file(&a.config, &a.overrides)?;
    let outcome = harmonic_core::config::run(&cfg)?;
    if json {
        print_json(&json!({
            "run_id": cfg.run_id,
            "arch": cfg.arch.to_string(),
            "epochs": outcome.records.len(),
            "final_train_loss": outcome.records.last().map(|r| r.train_loss),
            "final_train_acc": outcome.records.last().map(|r| r.train_acc),
            "final_test_err": outcome.final_test_err,
            "metrics": cfg.metrics.as_ref().map(|p| p.display().to_string()),
            "checkpoint": cfg.checkpoint.as_ref().map(|p| p.display().to_string()),
        }));
    } else {
        println!("{METRICS_HEADER}");
        for r in &outcome.records {
            println!("{}", r.csv());
        }
        println!("final test error: {}%", outcome.final_test_err);
    }
    Ok(())
}

fn dataset_for(arch: &Arch) -> DatasetKind {
    match arch {
        Arch::Mnist { .. } => DatasetKind::Mnist,
        Arch::Shallow { .. } => DatasetKind::Cifar10,
    }
}

fn eval_typed<T: Scalar>(path: &Path, ds: &LabeledDataset, batch: usize) -> Result<(String, f64), Error> {
    let mut model = load_checkpoint::<T>(path)?;
    let err = evaluate(&mut model, ds, batch)?;
    Ok((model.arch.clone(), err))
}

fn eval(a: &EvalArgs, json: bool) -> Outcome {
    let dtype = checkpoint_dtype(&a.checkpoint)?;
    let arch: Arch = {
        let probe = load_checkpoint::<f32>(&a.checkpoint)?;
        probe.arch.parse()?
    };
    let mut test = dataset_for(&arch).load(&data_root(&a.data), Split::Test)?;
    if let Some(size) = a.test_size {
        test = balanced_subset(&test, SubsetSpec { size, seed: 0 })?;
    }
    let (arch, err) = match dtype {
        DType::F32 => eval_typed::<f32>(&a.checkpoint, &test, a.batch)?,
        DType::F64 => eval_typed::<f64>(&a.checkpoint, &test, a.batch)?,
    };
    if json {
        print_json(&json!({"arch": arch, "samples": test.len(), "test_err": err}));
    } else {
        println!("{arch}: test error {err}% on {} samples", test.len());
    }
    Ok(())
}

fn table2(a: &Table2Args, json: bool) -> Outcome {
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    let algorithm = Algorithm::from_number(a.alg)?;
    let root = data_root(&a.data);
    let train_ds = data::load_mnist(&root, Split::Train)?;
    let test_ds = data::load_mnist(&root, Split::Test)?;
    let base = TrainConfig { epochs: a.epochs, eval_every: a.eval_every.unwrap_or(a.epochs.max(1)), ..TrainConfig::default() };
    let mut sink = MetricsSink::open(&a.metrics)?;
    let rows = run_table2(&train_ds, &test_ds, &a.sizes, &variants, algorithm, a.seeds, &base, |r| sink.write(r))?;
    if let Some(out) = &a.out {
        let mut s = format!("{TABLE2_HEADER}\n");
        for r in &rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        fs::write(out, s)?;
    }
    if json {
        print_json(&json!({
            "rows": rows.iter().map(|r| json!({
                "size": r.size,
                "variant": r.variant.name(),
                "test_errors": r.test_errors,
                "median_test_err": r.median,
                "reference_test_err": r.reference,
            })).collect::<Vec<_>>(),
        }));
    } else {
        println!("{:>7} {:<10} {:>5} {:>12} {:>10}", "size", "variant", "runs", "median_err%", "reference%");
        for r in &rows {
            let reference = r.reference.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
            println!("{:>7} {:<10} {:>5} {:>12.2} {:>10}", r.size, r.variant.name(), r.test_errors.len(), r.median, reference);
        }
    }
    Ok(())
}

fn stridesweep(a: &SweepArgs, json: bool) -> Outcome {
    let mode: ShallowMode = a.mode.parse()?;
    let strides = a.strides.clone().unwrap_or_else(|| sweep_strides(a.k));
    let kk = a.k * a.k;
    let truncations = a.truncations.clone().unwrap_or_else(|| {
        let mut t = vec![kk, (kk / 4).max(1), 1];
        t.dedup();
        t
    });
    for &s in &strides {
        Arch::shallow(a.k, s, truncations[0], mode)?.build::<f32>(0)?;
    }
    let root = data_root(&a.data);
    let mut train_ds = data::load_cifar10(&root, Split::Train)?;
    let mut test_ds = data::load_cifar10(&root, Split::Test)?;
    if let Some(size) = a.train_size {
        train_ds = balanced_subset(&train_ds, SubsetSpec { size, seed: 0 })?;
    }
    if let Some(size) = a.test_size {
        test_ds = balanced_subset(&test_ds, SubsetSpec { size, seed: 0 })?;
    }
    let base = TrainConfig {
        epochs: a.epochs,
        lr: 0.01,
        lr_schedule: LrSchedule { milestones: vec![(a.epochs / 2, 0.1)] },
        eval_every: a.epochs.max(1),
        ..TrainConfig::default()
    };
    let mut sink = MetricsSink::open(&a.metrics)?;
    let cells = run_stride_sweep(&train_ds, &test_ds, a.k, &strides, &truncations, mode, a.seeds, &base, |r| sink.write(r))?;
    if let Some(out) = &a.out {
        let mut s = format!("{SWEEP_HEADER}\n");
        for c in &cells {
            s.push_str(&c.csv());
            s.push('\n');
        }
        fs::write(out, s)?;
    }
    if json {
        print_json(&json!({
            "cells": cells.iter().map(|c| json!({
                "mode": c.mode.name(),
                "k": c.kernel,
                "stride": c.stride,
                "truncate": c.truncate,
                "features": c.features,
                "accuracies": c.accuracies,
                "mean_test_acc": c.mean_accuracy,
            })).collect::<Vec<_>>(),
        }));
    } else {
        println!("{SWEEP_HEADER}");
        for c in &cells {
            println!("{}", c.csv());
        }
    }
    Ok(())
}

struct Measured {
    seconds: f64,
    peak: usize,
}

fn time_forward(block: &mut HarmonicBlock<f32>, x: &Tensor<f32>, reps: usize) -> Result<Measured, Error> {
    block.forward(x, Mode::Eval)?;
    let start = Instant::now();
    for _ in 0..reps {
        block.forward(x, Mode::Eval)?;
    }
    Ok(Measured { seconds: start.elapsed().as_secs_f64() / reps as f64, peak: block.last_peak_elems() })
}

fn bench(a: &BenchArgs, json: bool) -> Outcome {
    let [h, w] = a.hw[..] else {
        return Err(Failure::Usage("--hw expects two extents, e.g. 32,32".into()));
    };
    if a.reps == 0 || a.batch == 0 {
        return Err(Failure::Usage("--reps and --batch must be >= 1".into()));
    }
    let algs = match a.alg {
        Some(n) => vec![Algorithm::from_number(n)?],
        None => vec![Algorithm::Expanded, Algorithm::Folded],
    };
    let spec = HarmonicSpec::new(a.n, a.m, a.k).padding(a.k / 2).subset(Subset::All);
    let dims = [a.batch, a.n, h, w];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&dims, |_| rng.gen_range(-1.0f32..1.0));
    let mut rows = Vec::new();
    for alg in algs {
        let report = cost_report(&spec, &dims, alg)?;
        let mut block = HarmonicBlock::<f32>::new("bench", spec.clone(), alg, &mut rng)?;
        let m = time_forward(&mut block, &x, a.reps)?;
        rows.push((report, m));
    }
    if json {
        print_json(&json!({
            "input": dims,
            "n": a.n, "m": a.m, "k": a.k,
            "results": rows.iter().map(|(r, m)| json!({
                "alg": r.algorithm.number(),
                "madds": r.madds,
                "standard_madds": r.standard_madds,
                "ratio_vs_standard_conv": r.ratio_vs_standard_conv.to_string(),
                "overhead": r.overhead.to_string(),
                "peak_intermediate_elems": r.peak_intermediate_elems,
                "measured_peak_elems": m.peak,
                "wall_time_s": m.seconds,
            })).collect::<Vec<_>>(),
        }));
    } else {
        println!("input {:?}, N={} M={} K={}", dims, a.n, a.m, a.k);
        println!(
            "{:>4} {:>14} {:>10} {:>10} {:>14} {:>14} {:>12}",
            "alg", "madds", "ratio", "overhead", "peak_elems", "measured_peak", "wall_ms"
        );
        for (r, m) in &rows {
            println!(
                "{:>4} {:>14} {:>10} {:>10} {:>14} {:>14} {:>12.3}",
                r.algorithm.number(),
                r.madds,
                r.ratio_vs_standard_conv.to_string(),
                r.overhead.to_string(),
                r.peak_intermediate_elems,
                m.peak,
                m.seconds * 1e3
            );
        }
    }
    Ok(())
}

fn compute_stats(a: &StatsArgs, json: bool) -> Outcome {
    let kind: DatasetKind = a.dataset.parse()?;
    let root = data_root(&a.data);
    let (raw, frozen): (_, Vec<(f64, f64)>) = match kind {
        DatasetKind::Mnist => {
            let (images, labels) = data::mnist_files(&root, Split::Train)?;
            (data::read_mnist_idx(&images, &labels)?, vec![(data::MNIST_MEAN, data::MNIST_STD)])
        }
        DatasetKind::Cifar10 => (
            data::read_cifar10_bin(&data::cifar_files(&root, Split::Train)?)?,
            data::CIFAR_MEAN.iter().copied().zip(data::CIFAR_STD).collect(),
        ),
    };
    let stats = raw.channel_stats();
    if json {
        print_json(&json!({
            "dataset": kind.name(),
            "samples": raw.len(),
            "channels": stats.iter().zip(&frozen).map(|((m, s), (fm, fs))| json!({
                "mean": m, "std": s, "frozen_mean": fm, "frozen_std": fs,
            })).collect::<Vec<_>>(),
        }));
    } else {
        println!("{} training samples: {}", kind.name(), raw.len());
        println!("{:>7} {:>10} {:>10} {:>12} {:>12}", "channel", "mean", "std", "frozen_mean", "frozen_std");
        for (c, ((m, s), (fm, fs))) in stats.iter().zip(&frozen).enumerate() {
            println!("{c:>7} {m:>10.4} {s:>10.4} {fm:>12.4} {fs:>12.4}");
        }
    }
    Ok(())
}
