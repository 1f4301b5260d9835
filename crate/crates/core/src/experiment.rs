//! TOML experiment configuration, data preparation and parameter sweeps.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    self, grade_split, inject_label_noise, normalize_scores, DataError, Dataset, InputKind,
    ScoreScaler, SessionPlan, SyntheticConfig,
};
use crate::models::{ModelError, ModelSpec};
use crate::trainer::{self, RunOutput, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Load samples from this CSV instead of generating them.
    pub csv: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub sessions: usize,
    pub shots: usize,
    /// Standard deviation of Gaussian noise added to training labels.
    pub label_noise: f64,
    /// Score range override; defaults to the generator range or the observed CSV range.
    pub score_range: Option<(f64, f64)>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: None,
            synthetic: SyntheticConfig::default(),
            sessions: 5,
            shots: 10,
            label_noise: 0.0,
            score_range: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Seeds for multi-seed commands.
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.sessions < 2 {
            return Err(ExperimentError::Invalid {
                field: "data.sessions",
                reason: format!("need at least 2, got {}", self.data.sessions),
            });
        }
        if self.data.shots == 0 {
            return Err(ExperimentError::Invalid {
                field: "data.shots",
                reason: "must be >= 1".into(),
            });
        }
        if !(self.data.label_noise >= 0.0 && self.data.label_noise.is_finite()) {
            return Err(ExperimentError::Invalid {
                field: "data.label_noise",
                reason: format!("{}", self.data.label_noise),
            });
        }
        if let Some((lo, hi)) = self.data.score_range {
            if hi <= lo || !lo.is_finite() || !hi.is_finite() {
                return Err(ExperimentError::Invalid {
                    field: "data.score_range",
                    reason: format!("[{lo}, {hi}] is empty"),
                });
            }
        }
        if self.data.csv.is_none() {
            SyntheticConfig {
                sessions: self.data.sessions,
                ..self.data.synthetic.clone()
            }
            .validate()?;
            if let Some(w) = &self.model.encoder {
                if w.first() != Some(&self.data.synthetic.input_dim) {
                    return Err(ExperimentError::Invalid {
                        field: "model.encoder",
                        reason: format!(
                            "input width {:?} does not match data.synthetic.input_dim = {}",
                            w.first(),
                            self.data.synthetic.input_dim
                        ),
                    });
                }
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Seeds for multi-seed commands; the training seed alone when none are listed.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    /// Loads or generates the dataset. Generated data depends only on the
    /// synthetic section, not on the training seed.
    pub fn dataset(&self) -> Result<Dataset> {
        let mut ds = match &self.data.csv {
            Some(path) => data::load_csv(path)?,
            None => data::generate_synthetic(&SyntheticConfig {
                sessions: self.data.sessions,
                ..self.data.synthetic.clone()
            })?,
        };
        if let Some(range) = self.data.score_range {
            ds.score_range = range;
        }
        Ok(ds)
    }

    /// Model spec matched to the dataset: precomputed features bypass the encoder.
    pub fn model_for(&self, dataset: &Dataset) -> Result<ModelSpec> {
        let spec = match (dataset.kind, &self.model.encoder) {
            (InputKind::Features, Some(_)) => ModelSpec::for_features(dataset.width()),
            _ => self.model.clone(),
        };
        spec.validate()?;
        let expected = match &spec.encoder {
            Some(w) => w[0],
            None => spec.feature_dim(),
        };
        if expected != dataset.width() {
            return Err(ExperimentError::Invalid {
                field: "model.encoder",
                reason: format!(
                    "model expects width {expected}, data has {}",
                    dataset.width()
                ),
            });
        }
        Ok(spec)
    }
}

/// Dataset, normalized plan and scaler for one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    /// Plan before normalization, labels in original units.
    pub raw_plan: SessionPlan,
    pub plan: SessionPlan,
    pub scaler: ScoreScaler,
    pub model: ModelSpec,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let dataset = cfg.dataset()?;
    prepare_with(cfg, dataset)
}

pub fn prepare_with(cfg: &ExperimentConfig, dataset: Dataset) -> Result<Prepared> {
    let seed = cfg.train.seed;
    let split = grade_split(&dataset, cfg.data.sessions, cfg.data.shots, seed)?;
    let raw_plan = inject_label_noise(
        &split,
        dataset.score_range,
        cfg.data.label_noise,
        seed.wrapping_add(0x9e37_79b9),
    );
    let (plan, scaler) = normalize_scores(&raw_plan, dataset.score_range)?;
    let model = cfg.model_for(&dataset)?;
    Ok(Prepared {
        dataset,
        raw_plan,
        plan,
        scaler,
        model,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<(Prepared, RunOutput)> {
    let p = prepare(cfg)?;
    let out = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &cfg.train)?;
    Ok((p, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Shots,
    Noise,
    Memory,
}

impl std::str::FromStr for SweepAxis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shots" => Ok(SweepAxis::Shots),
            "noise" => Ok(SweepAxis::Noise),
            "memory" => Ok(SweepAxis::Memory),
            other => Err(ExperimentError::Invalid {
                field: "axis",
                reason: format!("unknown sweep axis `{other}` (shots, noise, memory)"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub rho_avg: f64,
    pub rho_aft: Option<f64>,
    pub rho_fwt: Option<f64>,
}

fn apply_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let count = |field| {
        if value >= 0.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(ExperimentError::Invalid {
                field,
                reason: format!("{value} is not a count"),
            })
        }
    };
    match axis {
        SweepAxis::Shots => c.data.shots = count("shots")?,
        SweepAxis::Noise => c.data.label_noise = value,
        SweepAxis::Memory => c.train.memory_per_session = count("memory")?,
    }
    c.validate()?;
    Ok(c)
}

/// One run per (value, seed), executed in parallel; rows come back in grid order.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let dataset = cfg.dataset()?;
    let grid: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    grid.par_iter()
        .map(|&(value, seed)| {
            let c = apply_axis(cfg, axis, value)?.with_seed(seed);
            let p = prepare_with(&c, dataset.clone())?;
            let out = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train)?;
            Ok(SweepRow {
                value,
                seed,
                rho_avg: out.summary.rho_avg,
                rho_aft: out.summary.rho_aft,
                rho_fwt: out.summary.rho_fwt,
            })
        })
        .collect()
}
