//! `harmonic`: command-line front end for the harmonic-core library.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error,
//! 3 I/O or format error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use harmonic_core::Error;

#[derive(Parser, Debug)]
#[command(name = "harmonic", version, about = "DCT-basis convolution blocks: export, verify, train, benchmark")]
pub struct Cli {
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Export the DCT filter bank as PGM images plus a CSV of raw values.
    Filters(FiltersArgs),
    /// Run the numerical self-check suites.
    Verify(VerifyArgs),
    /// Train one model from a key=value config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// MNIST limited-data comparison: median test error per size and variant.
    Table2(Table2Args),
    /// Shallow strided networks under DCT coefficient truncation (CIFAR-10).
    Stridesweep(SweepArgs),
    /// Analytic and measured cost of the expanded vs folded algorithms.
    Bench(BenchArgs),
    /// Recompute dataset normalization constants from the training split.
    ComputeStats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct FiltersArgs {
    /// Filter size K (K×K filters, K² of them).
    #[arg(long)]
    pub size: usize,
    /// Keep only filters with u + v < LAMBDA.
    #[arg(long, conflicts_with = "truncate")]
    pub lambda: Option<usize>,
    /// Keep the first T filters in zigzag order.
    #[arg(long)]
    pub truncate: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Largest window length N for the lapped-transform suites.
    #[arg(long, default_value_t = 32)]
    pub max_n: usize,
    /// Tolerance of the identity suites (basis, lapped, f64 equivalence).
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Randomized configurations per equivalence suite.
    #[arg(long, default_value_t = 50)]
    pub configs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file of key=value lines.
    #[arg(long)]
    pub config: PathBuf,
    /// key=value assignments applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root; defaults to $HARM_DATA_DIR, then ./data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Balanced test subset size (seed 0), matching `test_size` in training.
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct Table2Args {
    /// Training-set sizes.
    #[arg(long, value_delimiter = ',', default_value = "300,1000")]
    pub sizes: Vec<usize>,
    /// Variants among conv, separable, harmonic.
    #[arg(long, value_delimiter = ',', default_value = "conv,separable,harmonic")]
    pub variants: Vec<String>,
    /// Number of seeds (0..S) per cell.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Algorithm for the harmonic and separable blocks after the first.
    #[arg(long, default_value_t = 2)]
    pub alg: u8,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Evaluate the test set every N epochs (the last epoch always is).
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Summary CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch metrics CSV path.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Window size K (4 or 8).
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// replicate or balanced.
    #[arg(long, default_value = "replicate")]
    pub mode: String,
    /// Strides; defaults to 1, K/2, K.
    #[arg(long, value_delimiter = ',')]
    pub strides: Option<Vec<usize>>,
    /// Retained coefficient counts; defaults to K², K²/4, 1.
    #[arg(long, value_delimiter = ',')]
    pub truncations: Option<Vec<usize>>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Balanced training subset size; all of the split when omitted.
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Balanced test subset size; all of the split when omitted.
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// 1 = expanded, 2 = folded; both when omitted.
    #[arg(long)]
    pub alg: Option<u8>,
    /// Input channels.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Output channels.
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Input height,width.
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    pub hw: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Timed forward passes per algorithm.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// mnist or cifar10.
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Verification(String),
    Usage(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Format(_) => Failure::Io(e.to_string()),
            Error::InvalidArgument(_) | Error::Shape(_) => Failure::Usage(e.to_string()),
            Error::NonFinite(_) => Failure::Verification(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Verification(m) => (1, m),
                Failure::Usage(m) => (2, m),
                Failure::Io(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
