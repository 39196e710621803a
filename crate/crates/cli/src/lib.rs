//! The `eastlab` command line: `gen-data`, `train`, `evaluate` and
//! `generate`, sharing config resolution and run manifests.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use commands::{run, Outcome};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or missing inputs; exit status 2.
    #[error("usage: {0}")]
    Usage(String),
    /// The command started but failed; exit status 1.
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }

    pub fn run(e: impl std::fmt::Display) -> Self {
        CliError::Run(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "eastlab",
    version,
    about = "Self-critical report generation on a synthetic corpus"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData(GenDataArgs),
    /// Train with teacher forcing, SCST or EAST.
    Train(TrainArgs),
    /// Beam-search a split and score it.
    Evaluate(EvaluateArgs),
    /// Generate a report for one study.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML config; its `[corpus]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub validation_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Tf,
    Scst,
    East,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EntropySignArg {
    Bonus,
    PaperLiteral,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Starting checkpoint; required for scst and east.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// TOML config; `[model]` and `[train]` tables are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Model preset when starting from scratch: desk, paper or tiny.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub entropy_weight: Option<f64>,
    #[arg(long, value_enum)]
    pub entropy_sign: Option<EntropySignArg>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub validation_limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "validation")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional config whose `[model]` table must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 256)]
    pub max_new_tokens: usize,
    /// Score only the first n studies.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SectionArg {
    Both,
    Findings,
    Impression,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON file holding one study record.
    #[arg(long)]
    pub study: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub section: SectionArg,
    /// Vocabulary file; defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 256)]
    pub max_new_tokens: usize,
}
