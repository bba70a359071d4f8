//! `prefopt` command line: forge, train, gradcheck, analyze, ablate.

mod commands;
mod config;
pub mod gradcheck;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_ablate, cmd_analyze, cmd_forge, cmd_gradcheck, cmd_train, AnalyzeSummary};
pub use config::{AnalyzeConfig, ExperimentConfig};

use crate::error::Result;

/// Fixed artifact names inside `output_dir`.
pub mod artifacts {
    pub const DATASET: &str = "dataset.jsonl";
    pub const STATS: &str = "stats.csv";
    pub const PAIR_STATS: &str = "pair_stats.csv";
    pub const METRICS: &str = "metrics.csv";
    pub const PROFILE: &str = "profile.csv";
    pub const REFERENCE_PROFILE: &str = "reference_profile.csv";
    pub const REPORT: &str = "report.csv";
    pub const RESOLVED: &str = "config.resolved";
    pub const REFERENCE: &str = "reference.ckpt";
    pub const POLICY: &str = "policy.ckpt";
    pub const ABLATION: &str = "ablation.csv";
}

#[derive(Debug, Parser)]
#[command(name = "prefopt", version, about = "Desk-scale preference optimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Experiment file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides both the data and the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate and print the resolved plan, then stop.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a preference dataset and its statistics.
    Forge(ForgeArgs),
    /// SFT warm-up, then preference optimization.
    Train(TrainArgs),
    /// Finite-difference and closed-form gradient checks.
    Gradcheck(GradcheckArgs),
    /// Position profile and logit-gradient report for a checkpoint.
    Analyze(AnalyzeArgs),
    /// One preference run per cell of the β/λ grid.
    Ablate(TrainArgs),
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[cfg(feature = "negative-control")]
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to analyze.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference checkpoint to compare the profile against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

impl Common {
    /// Reads the config file (or defaults) and applies the overrides.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.data.seed = seed;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Forge(a) => cmd_forge(&a.common.resolve()?, a.common.dry_run),
        Command::Train(a) => cmd_train(&a.common.resolve()?, a.init.as_deref(), a.common.dry_run),
        Command::Gradcheck(a) => {
            #[cfg(feature = "negative-control")]
            let flip = a.inject_sign_flip;
            #[cfg(not(feature = "negative-control"))]
            let flip = false;
            cmd_gradcheck(&a.common.resolve()?, flip, a.common.dry_run)
        }
        Command::Analyze(a) => cmd_analyze(
            &a.common.resolve()?,
            &a.checkpoint,
            a.reference.as_deref(),
            a.common.dry_run,
        )
        .map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a.common.resolve()?, a.init.as_deref(), a.common.dry_run),
    }
}
