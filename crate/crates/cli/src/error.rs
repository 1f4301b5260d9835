use std::path::Path;

use magr_core::checkpoint::CheckpointError;
use magr_core::data::DataError;
use magr_core::experiment::ExperimentError;
use magr_core::metrics::MetricError;
use magr_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing artifact ({what})")]
    MissingArtifact { path: String, what: &'static str },
    #[error("{path}:{line}: {reason}")]
    Artifact {
        path: String,
        line: u64,
        reason: String,
    },
    #[error("invalid argument `{arg}`: {reason}")]
    Argument { arg: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn artifact_error(path: &Path, line: u64, reason: impl Into<String>) -> CliError {
    CliError::Artifact {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}
