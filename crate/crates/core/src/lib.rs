//! Continual score regression with feature replay, a residual manifold
//! projector and an intra/inter-session graph regularizer.
//!
//! Everything runs on a small eager reverse-mode autodiff tape over dense
//! `f64` matrices, so results are deterministic for a given seed.

pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod gradcore;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod models;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use data::{Dataset, EvalSet, ScoreScaler, SessionPlan};
pub use experiment::{ExperimentConfig, SweepAxis};
pub use gradcore::{Tape, Tensor2, Var};
pub use metrics::{EvalMatrix, ForgettingRule};
pub use models::{ModelBundle, ModelSpec};
pub use trainer::{Method, RunOutput, Summary, TrainConfig};
