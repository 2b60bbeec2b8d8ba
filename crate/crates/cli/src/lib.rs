//! `msp`: generate a synthetic cohort, train single, MSP, CPM and HNED
//! models, evaluate and compare them, and apply them to whole volumes.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration or argument
//! error, 3 i/o or file format error, 4 training divergence, 5 model and
//! data shape mismatch.

pub mod config;
pub mod data;
pub mod error;
pub mod predict;
pub mod report;
pub mod train;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use msp_core::models::Arch;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "msp", version, about = "Multi-stage prediction harmonization experiments")]
pub struct Cli {
    /// JSON config; cohort schema for `gen-data`, run schema otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "msp-out")]
    pub out: PathBuf,
    /// Overrides every seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cohort directory or manifest file.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic multi-platform cohort and its manifest.
    GenData,
    /// Trains one model for one target platform.
    Train(TrainArgs),
    /// Scores checkpoints on the test patches.
    Evaluate(EvalArgs),
    /// Scores checkpoints and runs paired Wilcoxon tests per target.
    Compare(EvalArgs),
    /// Applies a checkpoint to a whole subject volume.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `single:<arch>`, `msp`, `cpm` or `hned`.
    #[arg(long)]
    pub mode: Mode,
    /// Target platform name from the manifest.
    #[arg(long)]
    pub target: String,
    /// Directory of single-net checkpoints: continued in single mode,
    /// combined in msp mode.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint files or directories of them.
    pub checkpoints: Vec<PathBuf>,
    /// Adds an identity-predictor row per target.
    #[arg(long)]
    pub identity: bool,
    /// Restricts scoring to these target platforms.
    #[arg(long)]
    pub target: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Subject index in the manifest.
    #[arg(long)]
    pub subject: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Single(Arch),
    Msp,
    Cpm,
    Hned,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "msp" => Ok(Mode::Msp),
            "cpm" => Ok(Mode::Cpm),
            "hned" => Ok(Mode::Hned),
            _ => match s.strip_prefix("single:") {
                Some(arch) => arch.parse().map(Mode::Single).map_err(|e| format!("{e}")),
                None => Err(format!("unknown mode {s:?}; expected single:<arch>, msp, cpm or hned")),
            },
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Single(a) => write!(f, "single:{a}"),
            Mode::Msp => f.write_str("msp"),
            Mode::Cpm => f.write_str("cpm"),
            Mode::Hned => f.write_str("hned"),
        }
    }
}

/// Resolved settings shared by every command except `gen-data`.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub data: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> CliResult<Self> {
        let mut cfg = RunConfig::load(cli.config.as_deref())?;
        if let Some(seed) = cli.seed {
            cfg.split.seed = seed;
            cfg.train.seed = seed;
            cfg.train.init_seed = seed;
            cfg.train.connection_seed = seed;
        }
        let data = cli
            .data
            .clone()
            .or_else(|| cfg.data.clone())
            .ok_or_else(|| CliError::Config("no cohort given; pass --data or set `data` in the config".into()))?;
        data::create_dir(&cli.out)?;
        Ok(Self {
            cfg,
            out: cli.out.clone(),
            data,
        })
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData => data::gen_data(cli),
        Command::Train(args) => train::cmd_train(&Context::new(cli)?, args),
        Command::Evaluate(args) => report::cmd_evaluate(&Context::new(cli)?, args, false),
        Command::Compare(args) => report::cmd_evaluate(&Context::new(cli)?, args, true),
        Command::Predict(args) => predict::cmd_predict(&Context::new(cli)?, args),
    }
}
