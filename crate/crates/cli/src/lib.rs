//! Command-line front end: argument parsing, run directories and the six
//! pipeline commands.

pub mod commands;
pub mod config;
pub mod run_dir;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ganext_core::losses::Task;
use ganext_core::ErrorKind;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// Worker threads for data loading. Results never depend on it.
pub const NUM_WORKERS_ENV: &str = "GANEXT_NUM_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ganext_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) | CliError::Io { .. } => EXIT_DATA,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(
    name = "ganext",
    version,
    about = "Patch-based 3D GAN for MRI/CBCT to CT synthesis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Partition a case root into training and validation ids.
    Split,
    /// Normalize and crop every case under a root.
    Preprocess,
    /// Write a synthetic paired dataset.
    MakePhantoms,
    /// Train generator and discriminator.
    Train,
    /// Synthesize sCT volumes from a checkpoint.
    Infer,
    /// Score predicted volumes against ground truth.
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Split => "split",
            Command::Preprocess => "preprocess",
            Command::MakePhantoms => "make-phantoms",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Checkpoint to resume from (`train`) or to synthesize with (`infer`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Reuse an existing run directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Single-threaded data loading.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Case root.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Split manifest (JSON).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Directory of predicted volumes, named `<case_id>.nii[.gz]`.
    #[arg(long, global = true)]
    pub pred: Option<PathBuf>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: ganext_core::Error| e.to_string())
}

/// Runs one command; the returned error carries the exit code.
pub fn run(cli: &Cli) -> Result<()> {
    commands::dispatch(cli.command, &cli.common)
}
