//! `cae`: train, apply, and benchmark concrete autoencoder feature selection
//! from the command line. One subcommand per artifact: `train` fits a model,
//! `select`/`impute` apply it, `eval` compares methods, `ablate` sweeps
//! temperature schedules, `groups` ranks each node's candidate features.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use cae_core::CaeError;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cae",
    version,
    about = "Concrete autoencoder feature selection",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.json, train_report.csv, selected_features.csv
    Train(TrainArgs),
    /// Extract the k selected feature columns from a dataset; writes selected.csv
    Select(ModelDataArgs),
    /// Reconstruct all features from a k-column selection CSV; writes imputed.csv
    Impute(ModelDataArgs),
    /// Compare selection methods on one dataset; writes eval.csv
    Eval(EvalArgs),
    /// Train under four temperature schedules; writes one train report per arm
    Ablate(TrainArgs),
    /// Rank each selector node's top features by weight; writes groups.csv
    Groups(GroupsArgs),
}

/// Where the features (and optional labels) come from.
#[derive(Args, Clone)]
pub struct SourceArgs {
    /// CSV feature table; a header row is autodetected
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// CSV column to split off as integer class labels
    #[arg(long, value_name = "NAME")]
    pub labels_col: Option<String>,
    /// IDX image file, optionally gzipped (the MNIST distribution format)
    #[arg(long, value_name = "FILE")]
    pub idx_images: Option<PathBuf>,
    /// IDX label file, optionally gzipped
    #[arg(long, value_name = "FILE")]
    pub idx_labels: Option<PathBuf>,
}

/// How rows are partitioned and features rescaled before training.
#[derive(Args, Clone)]
pub struct SplitArgs {
    /// Feature scaling fitted on the train split: none, minmax, zscore [default: none]
    #[arg(long, value_name = "KIND")]
    pub normalize: Option<String>,
    /// Train fraction of the shuffled rows [default: 0.72]
    #[arg(long, value_name = "FRAC")]
    pub split_train: Option<f64>,
    /// Validation fraction [default: 0.08]
    #[arg(long, value_name = "FRAC")]
    pub split_val: Option<f64>,
    /// Test fraction [default: 0.20]
    #[arg(long, value_name = "FRAC")]
    pub split_test: Option<f64>,
    /// Seed of the split permutation [default: 0]
    #[arg(long, value_name = "SEED")]
    pub split_seed: Option<u64>,
}

/// Training hyperparameters; unset values fall back to the config file, then
/// to the documented defaults.
#[derive(Args, Clone)]
pub struct HyperArgs {
    /// Number of features to select (required for train/eval/ablate)
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
    /// Training seed fixing initialization, shuffling, and sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs of temperature decay [default: 300]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epoch cap including post-decay epochs [default: 3x epochs]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Start temperature [default: 10]
    #[arg(long)]
    pub t0: Option<f64>,
    /// Final temperature [default: 0.01]
    #[arg(long)]
    pub tb: Option<f64>,
    /// Stop once mean max selection probability exceeds this [default: 0.99]
    #[arg(long)]
    pub stop_threshold: Option<f64>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size [default: 256]
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Decoder architecture: linear or hidden:<n>[,<n>...] [default: linear]
    #[arg(long, value_name = "SPEC")]
    pub decoder: Option<String>,
    /// unsup reconstructs the inputs; sup classifies the labels [default: unsup]
    #[arg(long, value_name = "MODE")]
    pub mode: Option<String>,
    /// key = value config file; command-line flags win on conflict
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Clone)]
pub struct ModelDataArgs {
    /// Trained model file (model.json from train)
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub source: SourceArgs,
    /// key = value config file; command-line flags win on conflict
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Comma-separated: cae, pca, variance-filter, random-selection [default: all four]
    #[arg(long, value_name = "LIST")]
    pub methods: Option<String>,
    /// key = value config file; command-line flags win on conflict
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Clone)]
pub struct GroupsArgs {
    /// Trained model file (model.json from train)
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Features to list per node [default: 3]
    #[arg(long, value_name = "T")]
    pub top: Option<usize>,
    /// key = value config file; command-line flags win on conflict
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

/// CAE_THREADS caps the rayon pool used by the numeric kernels.
fn init_threads() {
    if let Ok(v) = std::env::var("CAE_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => eprintln!(
                "warning: CAE_THREADS must be a positive integer, ignoring {:?}",
                v
            ),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_threads();
    let result = match &cli.command {
        Command::Train(a) => run::train(a),
        Command::Select(a) => run::select(a),
        Command::Impute(a) => run::impute(a),
        Command::Eval(a) => run::eval(a),
        Command::Ablate(a) => run::ablate(a),
        Command::Groups(a) => run::groups(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                CaeError::Divergence { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
