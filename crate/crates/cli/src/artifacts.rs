//! File layout of a run directory and the readers/writers for each artifact.

use std::path::Path;

use magr_core::experiment::ExperimentConfig;
use magr_core::memory::Payload;
use magr_core::metrics::EvalMatrix;
use magr_core::models;
use magr_core::trainer::{SessionEval, Summary, TrainError, TrainState};
use magr_core::Dataset;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{artifact_error, io_error, CliError, Result};

pub const RESULTS_CSV: &str = "results.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const FEATURES_CSV: &str = "features.csv";
pub const CONFIG_TOML: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_name(session: usize) -> String {
    format!("{CHECKPOINT_DIR}/session_{session}.json")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Resolved configuration; reproduces the run on its own.
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Paths relative to the manifest's directory.
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per training session.
    pub session_seconds: Vec<f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, seeds: Vec<u64>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            seeds,
            artifacts: Vec::new(),
            session_seconds: Vec::new(),
        }
    }

    /// Writes the manifest itself and lists it.
    pub fn save(mut self, dir: &Path) -> Result<Self> {
        self.artifacts.push(MANIFEST_JSON.to_string());
        write_json(&dir.join(MANIFEST_JSON), &self)?;
        Ok(self)
    }
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub session: usize,
    pub metric: String,
    pub target_session: Option<usize>,
    pub value: f64,
}

impl ResultRow {
    fn new(session: usize, metric: &str, target_session: Option<usize>, value: f64) -> Self {
        Self {
            session,
            metric: metric.to_string(),
            target_session,
            value,
        }
    }
}

/// Flattens the matrix: per-cell `rho`, pooled `rho_avg` per row, the
/// look-ahead and reference entries (session 0 marks the untrained
/// reference), and the final `rho_aft`/`rho_fwt`.
pub fn result_rows(matrix: &EvalMatrix, summary: &Summary) -> Vec<ResultRow> {
    let t = matrix.sessions;
    let mut rows = Vec::new();
    for i in 1..=t {
        for (j, v) in matrix.row(i) {
            rows.push(ResultRow::new(i, "rho", Some(j), v));
        }
        if let Some(v) = matrix.pooled(i) {
            rows.push(ResultRow::new(i, "rho_avg", None, v));
        }
    }
    for s in 2..=t {
        if let Some(v) = matrix.lookahead(s) {
            rows.push(ResultRow::new(s - 1, "rho_lookahead", Some(s), v));
        }
    }
    for s in 2..=t {
        if let Some(v) = matrix.reference(s) {
            rows.push(ResultRow::new(0, "rho_reference", Some(s), v));
        }
    }
    if let Some(v) = summary.rho_aft {
        rows.push(ResultRow::new(t, "rho_aft", None, v));
    }
    if let Some(v) = summary.rho_fwt {
        rows.push(ResultRow::new(t, "rho_fwt", None, v));
    }
    rows
}

/// Rebuilds the matrix from `results.csv` rows.
pub fn matrix_from_rows(rows: &[ResultRow], sessions: usize) -> EvalMatrix {
    let mut m = EvalMatrix::new(sessions);
    for r in rows {
        match (r.metric.as_str(), r.target_session) {
            ("rho", Some(j)) => m.set(r.session, j, r.value),
            ("rho_avg", None) => m.set_pooled(r.session, r.value),
            ("rho_lookahead", Some(j)) => m.set_lookahead(j, r.value),
            ("rho_reference", Some(j)) => m.set_reference(j, r.value),
            _ => {}
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub session: usize,
    pub truth: f64,
    pub pred: f64,
}

pub fn prediction_rows(dataset: &Dataset, evals: &[SessionEval]) -> Vec<PredictionRow> {
    evals
        .iter()
        .flat_map(|e| {
            e.indices
                .iter()
                .zip(e.truth.iter().zip(&e.pred))
                .map(move |(&i, (&truth, &pred))| PredictionRow {
                    id: dataset.samples[i].id.clone(),
                    session: e.session,
                    truth,
                    pred,
                })
        })
        .collect()
}

/// A feature vector tagged by origin (`bank` or `test`) and session.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub source: String,
    pub session: usize,
    pub score: f64,
    pub feature: Vec<f64>,
}

/// Final-model features of every test sample plus the stored bank entries
/// (raw-input entries are encoded first).
pub fn feature_rows(
    state: &TrainState,
    dataset: &Dataset,
    evals: &[SessionEval],
) -> Result<Vec<FeatureRow>> {
    let encoder = &state.bundle.encoder;
    let mut rows = Vec::new();
    if let Some(bank) = &state.bank {
        let stored = bank.features();
        let feats = match bank.payload {
            Payload::Feature => stored,
            Payload::RawInput => models::encode(encoder, &stored).map_err(TrainError::from)?,
        };
        for (k, e) in bank.entries().iter().enumerate() {
            rows.push(FeatureRow {
                source: "bank".into(),
                session: e.session,
                score: e.score,
                feature: feats.row(k).to_vec(),
            });
        }
    }
    for e in evals {
        let feats =
            models::encode(encoder, &dataset.inputs(&e.indices)).map_err(TrainError::from)?;
        for (k, &score) in e.truth.iter().enumerate() {
            rows.push(FeatureRow {
                source: "test".into(),
                session: e.session,
                score,
                feature: feats.row(k).to_vec(),
            });
        }
    }
    Ok(rows)
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_error(path))
}

pub fn read_file(path: &Path, what: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path: path.display().to_string(),
            what,
        });
    }
    std::fs::read_to_string(path).map_err(io_error(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_file(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let text = read_file(path, what)?;
    serde_json::from_str(&text).map_err(|e| artifact_error(path, e.line() as u64, e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| artifact_error(path, 0, e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| artifact_error(path, 0, e.to_string()))?;
    std::fs::write(path, bytes).map_err(io_error(path))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let text = read_file(path, what)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| {
            row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                artifact_error(path, line, e.to_string())
            })
        })
        .collect()
}

pub fn write_features(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.feature.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["source".to_string(), "session".into(), "score".into()];
    header.extend((0..width).map(|k| format!("f{k}")));
    let err = |e: csv::Error| artifact_error(path, 0, e.to_string());
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.source.clone(), r.session.to_string(), r.score.to_string()];
        rec.extend(r.feature.iter().map(f64::to_string));
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| artifact_error(path, 0, e.to_string()))?;
    std::fs::write(path, bytes).map_err(io_error(path))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let text = read_file(path, "feature table")?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            artifact_error(path, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| {
                    artifact_error(path, line, format!("column {} is not a number", k + 1))
                })
        };
        if rec.len() < 3 {
            return Err(artifact_error(
                path,
                line,
                "expected source,session,score,f0..",
            ));
        }
        let session = rec[1]
            .parse()
            .map_err(|_| artifact_error(path, line, format!("bad session `{}`", &rec[1])))?;
        rows.push(FeatureRow {
            source: rec[0].to_string(),
            session,
            score: num(2)?,
            feature: (3..rec.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}
