//! `xray-xplain <subcommand> --config <path> [--out <dir>] [--seed <u64>]`
//!
//! Every subcommand reads the INI run configuration and the outputs of the
//! stages before it from the output directory:
//!
//! | stage      | reads                          | writes                                        |
//! |------------|--------------------------------|-----------------------------------------------|
//! | preprocess | manifest, PNG images           | `dataset.dcxd`, `preprocess.json`             |
//! | train      | `dataset.dcxd`                 | `snapshots/*.dcxs`, `train_log.csv`           |
//! | select     | `snapshots/`                   | `selection.json`                              |
//! | ensemble   | `dataset.dcxd`, `selection.json` | `predictions.csv`                           |
//! | evaluate   | `predictions.csv`              | `metrics.json`, `metrics.txt`, `roc_<label>.csv` |
//! | explain    | `dataset.dcxd`, `selection.json` | `explain/<image>.png`, `explain/<image>.json` |

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use thiserror::Error;

pub mod fixture;
pub mod stages;

pub use stages::run_stage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    Preprocess,
    Train,
    Select,
    Ensemble,
    Explain,
    Evaluate,
}

impl Subcommand {
    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::Preprocess => "preprocess",
            Subcommand::Train => "train",
            Subcommand::Select => "select",
            Subcommand::Ensemble => "ensemble",
            Subcommand::Explain => "explain",
            Subcommand::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "xray-xplain",
    about = "Chest X-ray classification with snapshot ensembles and saliency maps",
    override_usage = "xray-xplain <SUBCOMMAND> --config <PATH> [--out <DIR>] [--seed <U64>]"
)]
pub struct Args {
    #[arg(value_enum)]
    pub subcommand: Subcommand,
    /// INI run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory shared by all stages.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: configuration, manifest, or a missing prerequisite.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

pub fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `argv` (including the program name), runs one stage and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("xray-xplain {}: {e}", args.subcommand.name());
            e.exit_code()
        }
    }
}

pub fn execute(args: &Args) -> Result<(), CliError> {
    let mut cfg = xplain_core::io::RunConfig::load(&args.config).map_err(validation)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    std::fs::create_dir_all(&args.out).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    run_stage(args.subcommand, &cfg, &args.out)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}
