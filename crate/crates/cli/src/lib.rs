//! `calcifuse` command line: config loading, run directories and the
//! pipeline stages.

pub mod config;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Engine, Overrides, RunConfig};
pub use stages::{Outcome, Run};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config {field}: {message}")]
    Config { field: String, message: String },

    #[error("missing {what} at {}; run `calcifuse {command}` first", path.display())]
    Missing {
        what: &'static str,
        path: PathBuf,
        command: &'static str,
    },

    #[error(transparent)]
    Core(#[from] calcifuse::Error),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "calcifuse", version, about = "Calcification diagnosis by inpainting-based structure suppression and feature fusion")]
pub struct Cli {
    /// Run configuration (sectioned key = value file).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; runs land in `<out>/<run-id>/`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Inpainting engine used by extraction.
    #[arg(long, global = true, value_enum)]
    pub engine: Option<Engine>,
    /// Write per-sample stage contact sheets during extraction.
    #[arg(long, global = true)]
    pub debug_stages: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Render the phantom dataset.
    PhantomGen,
    /// Train the inpainting generator on normal patches.
    TrainInpaint,
    /// Produce refined nodule images for every nodule patch.
    Extract,
    /// Add transformed copies of calcified training pairs.
    Augment,
    /// Train the dual-branch fusion classifier.
    TrainFusion,
    /// Write metrics, ROC curves and plots for the raw, refined and fused models.
    Eval,
    /// Run every stage in order.
    RunAll,
    /// Check that an augmented pair replays byte-identically from its record.
    Replay {
        #[arg(long)]
        id: String,
    },
    /// Print the resolved configuration and run directory.
    ShowConfig,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            engine: self.engine,
            debug_stages: self.debug_stages,
        }
    }
}

/// Resolve the configuration from `env` and run the command.
pub fn execute<I, K, V>(cli: &Cli, env: I) -> Result<(Run, Vec<Outcome>), CliError>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let cfg = RunConfig::load(cli.config.as_deref(), env, &cli.overrides())?;
    let run = Run::open(cfg)?;
    let outcomes = match &cli.command {
        Command::PhantomGen => vec![stages::phantom_gen(&run)?],
        Command::TrainInpaint => vec![stages::train_inpaint(&run)?],
        Command::Extract => vec![stages::extract(&run)?],
        Command::Augment => vec![stages::augment(&run)?],
        Command::TrainFusion => vec![stages::train_fusion(&run)?],
        Command::Eval => vec![stages::eval(&run)?],
        Command::RunAll => stages::run_all(&run)?,
        Command::Replay { id } => vec![stages::replay(&run, id)?],
        Command::ShowConfig => Vec::new(),
    };
    Ok((run, outcomes))
}
