//! `ngebm`: train, evaluate, score and attack energy-based classifiers.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Runtime(ngebm::Error),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) | CliError::Io(..) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
            CliError::Io(p, e) => write!(f, "error: {}: {e}", p.display()),
        }
    }
}

impl From<ngebm::Error> for CliError {
    fn from(e: ngebm::Error) -> Self {
        match e {
            ngebm::Error::Config(m) => CliError::Config(m),
            ngebm::Error::InvalidSpec(m) => CliError::Config(format!("invalid model spec: {m}")),
            other => CliError::Runtime(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ngebm", version, about = "Energy-based classifier training and evaluation")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to load; defaults to `<out>/checkpoint.ckpt`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "NGEBM_OUT_DIR")]
    out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel evaluation.
    #[arg(long, global = true, env = "NGEBM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train a model (repeated `repeats` times with consecutive seeds).
    Train,
    /// Accuracy, mean confidence and ECE on the eval set.
    Eval,
    /// Reliability bins for the eval set.
    Calibrate,
    /// Score in- and out-of-distribution sets; AUROC, ROC and histograms.
    Ood {
        /// Restrict to one score kind.
        #[arg(long)]
        score: Option<ngebm::energy::ScoreKind>,
    },
    /// PGD accuracy-versus-epsilon sweep on the eval set.
    Attack {
        /// Restrict to one norm.
        #[arg(long)]
        norm: Option<ngebm::attacks::Norm>,
    },
    /// Histogram of energy-gradient magnitudes over the training set.
    HistEgm,
    /// Draw SGLD samples from the model and report divergence.
    Sample {
        /// Overrides `sample.n`.
        #[arg(long)]
        n: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Calibrate => "calibrate",
            Command::Ood { .. } => "ood",
            Command::Attack { .. } => "attack",
            Command::HistEgm => "hist-egm",
            Command::Sample { .. } => "sample",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let config_path = cli
        .config
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let ctx = commands::Context::load(config_path, cli.out, cli.seed, cli.checkpoint)?;
    match &cli.command {
        Command::Train => commands::train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Calibrate => commands::calibrate(&ctx),
        Command::Ood { score } => commands::ood(&ctx, *score),
        Command::Attack { norm } => commands::attack(&ctx, *norm),
        Command::HistEgm => commands::hist_egm(&ctx),
        Command::Sample { n } => commands::sample(&ctx, *n),
    }
    .map(|summary| eprintln!("{}: {summary}", cli.command.name()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
