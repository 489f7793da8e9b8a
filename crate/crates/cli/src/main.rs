//! `episeg`: generate data, train, evaluate and time few-shot segmenters.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<episeg::Error> for Failure {
    fn from(e: episeg::Error) -> Self {
        use episeg::Error as E;
        match e {
            E::InvalidFold(_) | E::InvalidArgument(_) | E::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "episeg", version, about = "Few-shot segmentation by predicting classifier parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shape corpus.
    Gen(GenArgs),
    /// Train the two-branch model or a baseline network on a training fold.
    Train(TrainArgs),
    /// Score one predictor on a test-fold benchmark.
    Eval(EvalArgs),
    /// Time predictors for several support counts.
    Time(TimeArgs),
}

/// Options shared by every command that reads a config.
#[derive(Args)]
struct Common {
    /// TOML config file; flags and `--set` win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed (wins over EPISEG_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// `ours`, `base` (feature net for nn1/logreg/finetune) or `siamese`.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    /// Checkpoint: the two-branch model, or the network a baseline needs.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<String>,
    /// `gt` scores the ground truth itself.
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Replay the episodes of a manifest instead of sampling.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for the report CSV, manifest and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TimeArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    /// Comma-separated support counts.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Two-branch model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Base feature net checkpoint (nn1, logreg, finetune).
    #[arg(long)]
    base: Option<PathBuf>,
    /// Siamese matcher checkpoint.
    #[arg(long)]
    siamese: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Time(a) => commands::time(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
