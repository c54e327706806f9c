//! Command-line front end for the anticipation library.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use anticipation_core::data::MixMode;
use clap::{Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "anticipate",
    version,
    about = "Traffic accident anticipation on feature bundles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic collision dataset.
    GenSynth(GenSynthArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or precomputed probabilities) on a split.
    Eval(EvalArgs),
    /// Per-frame probabilities for one bundle.
    Predict(PredictArgs),
    /// Mix generated negatives into a training split.
    MixAugment(MixArgs),
    /// Accident start-frame and scene-factor statistics.
    Stats(StatsArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub n_pos: usize,
    #[arg(long)]
    pub n_neg: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Test positives; with --n-test-neg, --n-pos/--n-neg become train-only counts.
    #[arg(long, requires = "n_test_neg")]
    pub n_test_pos: Option<usize>,
    #[arg(long, requires = "n_test_pos")]
    pub n_test_neg: Option<usize>,
    /// JSON file with scenario parameters; flags below override it.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "probs_file")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// JSON object mapping video id to its per-frame probabilities.
    #[arg(long)]
    pub probs_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Add,
    Replace,
}

impl From<ModeArg> for MixMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Add => MixMode::Add,
            ModeArg::Replace => MixMode::Replace,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct MixArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Manifest of generated negative videos.
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub ratio: f64,
    #[arg(long, value_enum, default_value = "add")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split used for the factor distribution.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one command, writing the human-readable report to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> CliResult<()> {
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a, out),
        Command::Train(a) => commands::train(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Predict(a) => commands::predict(&a, out),
        Command::MixAugment(a) => commands::mix_augment(&a, out),
        Command::Stats(a) => commands::stats(&a, out),
    }
}
