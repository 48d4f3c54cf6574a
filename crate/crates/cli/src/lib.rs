//! Command-line harness: training, evaluating, and comparing the image
//! classifiers, plus synthetic-dataset generation and gradient self-checks.
//!
//! Exit-code discipline: 0 success, 1 usage or invalid configuration,
//! 2 data/IO/checkpoint failures, 3 numeric failures (divergence or a
//! failed gradient check).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mgcn_core::Error;

mod commands;
mod manifest;
mod settings;
mod table;

#[derive(Parser)]
#[command(
    name = "mgcn",
    version,
    about = "Train, evaluate, and compare small binary image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, history, and manifest to --out
    Train(TrainArgs),
    /// Score a finished run's checkpoint and write a metric report
    Evaluate(EvaluateArgs),
    /// Consolidate finished runs into one comparison table
    Compare(CompareArgs),
    /// Check analytic gradients against finite differences
    GradCheck(GradCheckArgs),
    /// Write a synthetic two-class PNG dataset tree
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Model name: cnn, alexnet, inception-v4, densenet-mini, or vgg-mini
    #[arg(long)]
    pub model: Option<String>,
    /// Dataset root containing NORMAL/ and COVID/ subdirectories
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate a synthetic dataset with N records per class instead
    #[arg(long, value_name = "N")]
    pub synth: Option<usize>,
    /// Square input size in pixels (default depends on the model)
    #[arg(long = "img-size")]
    pub img_size: Option<usize>,
    /// Input channels: 1 or 3 (default is the model's native count)
    #[arg(long)]
    pub channels: Option<usize>,
    /// Training epochs (default 20)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Records per batch (default 32)
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Learning rate (default 0.001)
    #[arg(long)]
    pub lr: Option<f32>,
    /// Optimizer: sgd or adam (default adam)
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Master seed for initialization, shuffling, and synthesis (default 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train fraction of the stratified split (default 0.8)
    #[arg(long, value_name = "FRACTION")]
    pub split: Option<f64>,
    /// Decision threshold for metric reports (default 0.5)
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Run directory to create (receives checkpoint.mgcn, history.kv,
    /// manifest.kv)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// key=value config file; flags override its entries
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Run directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    /// Score this dataset root instead of the run's own validation split
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Decision threshold (default: the run's recorded threshold)
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Report file (default: <run>/report.kv)
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    /// Run directories written by `train`
    #[arg(required = true, num_args = 1.., value_name = "RUN_DIR")]
    pub runs: Vec<PathBuf>,
    /// Write the machine-readable lines to this file instead of stdout
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradCheckArgs {
    /// Seed for the generated check cases (default 0)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference trials per op (default 100)
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Pass threshold on the max relative error (default 1e-3)
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Records to generate per class
    #[arg(long = "per-class", value_name = "N")]
    pub per_class: usize,
    /// Square image size in pixels (default 16)
    #[arg(long = "img-size", default_value_t = 16)]
    pub img_size: usize,
    /// Generation seed (default 0)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory to receive the NORMAL/ and COVID/ PNG trees
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Parses arguments (the first item is the binary name), runs the selected
/// command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return i32::from(e.use_stderr());
        }
    };
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Compare(a) => commands::compare(a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 1 for invalid requests, 2 for data/IO problems, 3 for numeric failures.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invalid(_) | Error::Shape(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => 2,
        Error::Numeric(_) => 3,
    }
}
