//! Versioned JSON checkpoints written at session boundaries.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ScoreScaler;
use crate::experiment::ExperimentConfig;
use crate::memory::MemoryBank;
use crate::models::{Encoder, Mlp, MlpSpec, ModelBundle, ModelError, ModelSpec, Regressor};
use crate::trainer::{RngStreams, TrainState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("parameter block `{0}` does not match the model spec")]
    ParamLength(&'static str),
    #[error("invalid rng state")]
    RngState,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Flat parameter arrays in layer order (`w0, b0, w1, b1, ...`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlocks {
    /// Empty for the identity encoder.
    pub encoder: Vec<f64>,
    pub frozen_encoder: Option<Vec<f64>>,
    pub projector: Vec<f64>,
    pub regressor_trunk: Vec<f64>,
    pub mean_head: Vec<f64>,
    pub std_head: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Completed sessions.
    pub session: usize,
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub params: ParamBlocks,
    pub bank: Option<MemoryBank>,
    pub scaler: ScoreScaler,
    pub rng_state: String,
}

fn encoder_flat(e: &Encoder) -> Vec<f64> {
    match e {
        Encoder::Mlp(m) => m.flat(),
        Encoder::Identity { .. } => Vec::new(),
    }
}

fn encoder_from(spec: &ModelSpec, flat: &[f64], block: &'static str) -> Result<Encoder> {
    match &spec.encoder {
        Some(w) => Mlp::from_flat(MlpSpec::new(w.clone())?, flat)
            .map(Encoder::Mlp)
            .ok_or(CheckpointError::ParamLength(block)),
        None if flat.is_empty() => Ok(Encoder::Identity {
            width: spec.feature_dim(),
        }),
        None => Err(CheckpointError::ParamLength(block)),
    }
}

fn mlp_from(widths: Vec<usize>, flat: &[f64], block: &'static str) -> Result<Mlp> {
    Mlp::from_flat(MlpSpec::new(widths)?, flat).ok_or(CheckpointError::ParamLength(block))
}

impl Checkpoint {
    pub fn capture(
        state: &TrainState,
        config: &ExperimentConfig,
        model: &ModelSpec,
        scaler: ScoreScaler,
    ) -> Self {
        let b = &state.bundle;
        Self {
            format_version: FORMAT_VERSION,
            session: state.session,
            config: config.clone(),
            model: model.clone(),
            params: ParamBlocks {
                encoder: encoder_flat(&b.encoder),
                frozen_encoder: b.frozen_encoder.as_ref().map(encoder_flat),
                projector: b.projector.flat(),
                regressor_trunk: b.regressor.trunk.flat(),
                mean_head: b.regressor.mean_head.flat(),
                std_head: b.regressor.std_head.flat(),
            },
            bank: state.bank.clone(),
            scaler,
            rng_state: state.rngs.encode(),
        }
    }

    pub fn bundle(&self) -> Result<ModelBundle> {
        let spec = &self.model;
        spec.validate()?;
        let p = &self.params;
        let hidden = *spec.regressor_trunk.last().expect("validated");
        Ok(ModelBundle {
            encoder: encoder_from(spec, &p.encoder, "encoder")?,
            frozen_encoder: p
                .frozen_encoder
                .as_deref()
                .map(|f| encoder_from(spec, f, "frozen_encoder"))
                .transpose()?,
            projector: mlp_from(spec.projector.clone(), &p.projector, "projector")?,
            regressor: Regressor {
                trunk: mlp_from(
                    spec.regressor_trunk.clone(),
                    &p.regressor_trunk,
                    "regressor_trunk",
                )?,
                mean_head: mlp_from(vec![hidden, 1], &p.mean_head, "mean_head")?,
                std_head: mlp_from(vec![hidden, 1], &p.std_head, "std_head")?,
            },
        })
    }

    pub fn state(&self) -> Result<TrainState> {
        Ok(TrainState {
            bundle: self.bundle()?,
            bank: self.bank.clone(),
            session: self.session,
            rngs: RngStreams::decode(&self.rng_state).ok_or(CheckpointError::RngState)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    /// Parses a checkpoint, rejecting other format versions before decoding the body.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
