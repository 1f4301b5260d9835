use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use magr_core::experiment::{ExperimentConfig, SweepAxis};
use magr_core::trainer::Method;

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(
    name = "magr",
    version,
    about = "Continual score regression experiments"
)]
pub struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training seed (overrides `train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Seed list for multi-seed commands (overrides `seeds`).
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long, global = true, env = "MAGR_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// magr, sequential-ft, joint, replay-raw or replay-feature-naive.
    #[arg(long, global = true)]
    pub method: Option<Method>,
    #[command(flatten)]
    pub flags: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Switches layered over the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Drop the manifold projector.
    #[arg(long, global = true)]
    pub no_mp: bool,
    /// Projector output replaces the feature instead of adding to it.
    #[arg(long, global = true)]
    pub no_residual: bool,
    /// Drop the block terms of the graph regularizer.
    #[arg(long, global = true)]
    pub no_ii_gr: bool,
    /// Drop the whole-matrix term of the graph regularizer.
    #[arg(long, global = true)]
    pub no_j_gr: bool,
    /// Squared error instead of row KL in the graph regularizer.
    #[arg(long, global = true)]
    pub mse_gr: bool,
    /// Random exemplar selection instead of ordered uniform sampling.
    #[arg(long, global = true)]
    pub random_sampling: bool,
    /// Swap the arguments of the row KL divergence.
    #[arg(long, global = true)]
    pub reverse_kl: bool,
    /// Unsigned score differences in the graph regularizer.
    #[arg(long, global = true)]
    pub abs_score_distance: bool,
    /// One pass over each session's data.
    #[arg(long, global = true)]
    pub online: bool,
    /// Maximum epochs per session.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset and its session split.
    Gen,
    /// Write the session split of the configured dataset.
    Split,
    /// Train one run and write checkpoints, results and summary.
    Train,
    /// Re-evaluate a run directory or a single checkpoint.
    Eval {
        /// Run directory or checkpoint file.
        path: PathBuf,
        /// Dataset CSV to evaluate on instead of the configured one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the ablation grid over the configured seeds.
    Ablate,
    /// Vary one setting over a grid of values and seeds.
    Sweep {
        /// Setting to vary: shots, noise or memory.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Render SVG plots from run directories.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Run directories, or sweep output directories for `--kind sweep`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Tabulate run summaries as markdown.
    Report {
        /// Run, ablation or sweep output directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Scatter,
    Sessions,
    Sweep,
    Pca2d,
}

impl Cli {
    /// Config file (or defaults) with command-line overrides applied and validated.
    pub fn resolve_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(method) = self.method {
            cfg.train.method = method;
        }
        let f = &self.flags;
        let a = &mut cfg.train.ablation;
        a.no_mp |= f.no_mp;
        a.no_residual |= f.no_residual;
        a.no_ii_gr |= f.no_ii_gr;
        a.no_j_gr |= f.no_j_gr;
        a.mse_gr |= f.mse_gr;
        a.random_sampling |= f.random_sampling;
        a.reverse_kl |= f.reverse_kl;
        a.abs_score_distance |= f.abs_score_distance;
        cfg.train.online |= f.online;
        if let Some(e) = f.epochs {
            cfg.train.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
