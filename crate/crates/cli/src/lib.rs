//! Experiment runner for `magr-core`: config resolution, subcommands,
//! run-directory artifacts and SVG plots.

pub mod args;
pub mod artifacts;
pub mod commands;
pub mod error;
pub mod pca;
pub mod svg;

pub use args::{Cli, Command, PlotKind};
pub use artifacts::RunManifest;
pub use error::{CliError, Result};
