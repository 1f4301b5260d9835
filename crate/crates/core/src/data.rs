//! Datasets, the grade-incremental session split, score scaling, label noise
//! and CSV ingestion.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::Tensor2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("grade {grade} has {available} samples, fewer than {shots} shots")]
    InsufficientSamples {
        grade: usize,
        available: usize,
        shots: usize,
    },
    #[error("degenerate score range [{min}, {max}]")]
    DegenerateRange { min: f64, max: f64 },
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    InconsistentWidth {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: u64, id: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Whether the vectors are raw inputs for the encoder or precomputed features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    #[default]
    Raw,
    Features,
}

impl InputKind {
    fn prefix(self) -> char {
        match self {
            InputKind::Raw => 'x',
            InputKind::Features => 'f',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub x: Vec<f64>,
    /// Score in original units.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: InputKind,
    pub samples: Vec<Sample>,
    /// Declared score range in original units.
    pub score_range: (f64, f64),
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn width(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn inputs(&self, indices: &[usize]) -> Tensor2 {
        if indices.is_empty() {
            return Tensor2::zeros(0, self.width());
        }
        let rows: Vec<&[f64]> = indices
            .iter()
            .map(|&i| self.samples[i].x.as_slice())
            .collect();
        Tensor2::from_rows(&rows)
    }

    pub fn scores(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.samples[i].score).collect()
    }

    pub fn ids(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .map(|&i| self.samples[i].id.clone())
            .collect()
    }

    /// Range spanned by the scores present.
    pub fn observed_range(&self) -> (f64, f64) {
        self.samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.score), hi.max(s.score))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub input_dim: usize,
    pub sessions: usize,
    /// Standard deviation of additive input noise.
    pub noise: f64,
    /// Amplitude of the per-grade affine distortion of the input map.
    pub drift: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 100,
            input_dim: 32,
            sessions: 5,
            noise: 0.05,
            drift: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(DataError::InvalidConfig { field, reason });
        if self.sessions < 2 {
            return bad(
                "sessions",
                format!("need at least 2 sessions, got {}", self.sessions),
            );
        }
        if self.n < self.sessions {
            return bad(
                "n",
                format!("{} samples for {} sessions", self.n, self.sessions),
            );
        }
        if self.input_dim == 0 {
            return bad("input_dim", "must be >= 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(
                "noise",
                format!("{} is not a finite non-negative value", self.noise),
            );
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return bad(
                "drift",
                format!("{} is not a finite non-negative value", self.drift),
            );
        }
        Ok(())
    }
}

pub const SYNTHETIC_RANGE: (f64, f64) = (0.0, 100.0);
const HARMONICS: usize = 3;

/// Smooth random map from latent skill in [0, 1] to the input space, with an
/// affine distortion whose strength grows with the grade.
struct InputMap {
    amp: Vec<[f64; HARMONICS]>,
    freq: Vec<[f64; HARMONICS]>,
    phase: Vec<[f64; HARMONICS]>,
    drift_mix: Tensor2,
    drift_shift: Vec<f64>,
    drift: f64,
    grades: usize,
}

impl InputMap {
    fn new(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.input_dim;
        let mut amp = Vec::with_capacity(d);
        let mut freq = Vec::with_capacity(d);
        let mut phase = Vec::with_capacity(d);
        for _ in 0..d {
            let mut a = [0.0; HARMONICS];
            let mut w = [0.0; HARMONICS];
            let mut p = [0.0; HARMONICS];
            for h in 0..HARMONICS {
                let g: f64 = rng.sample(StandardNormal);
                a[h] = g / (HARMONICS as f64).sqrt();
                w[h] = rng.random_range(0.5..3.0) * std::f64::consts::PI;
                p[h] = rng.random_range(0.0..std::f64::consts::TAU);
            }
            amp.push(a);
            freq.push(w);
            phase.push(p);
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mix = (0..d * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        let drift_mix = Tensor2::new(d, d, mix).expect("sized");
        let drift_shift = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            amp,
            freq,
            phase,
            drift_mix,
            drift_shift,
            drift: cfg.drift,
            grades: cfg.sessions,
        }
    }

    fn base(&self, z: f64) -> Vec<f64> {
        (0..self.amp.len())
            .map(|k| {
                (0..HARMONICS)
                    .map(|h| self.amp[k][h] * (self.freq[k][h] * z + self.phase[k][h]).sin())
                    .sum()
            })
            .collect()
    }

    fn eval(&self, z: f64, grade: usize) -> Vec<f64> {
        let phi = self.base(z);
        if self.drift == 0.0 {
            return phi;
        }
        // the distortion grows linearly from the lowest grade to the highest
        let w = self.drift * grade as f64 / (self.grades - 1) as f64;
        let d = phi.len();
        (0..d)
            .map(|j| {
                let mixed: f64 = (0..d).map(|k| phi[k] * self.drift_mix.get(k, j)).sum();
                phi[j] + w * (mixed + self.drift_shift[j])
            })
            .collect()
    }
}

/// Latent skill `z ~ U[0,1]`, score `100 z`, input `Phi_g(z) + noise`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let map = InputMap::new(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| DataError::InvalidConfig {
        field: "noise",
        reason: e.to_string(),
    })?;
    let (lo, hi) = SYNTHETIC_RANGE;
    let samples = (0..cfg.n)
        .map(|i| {
            let z: f64 = rng.random_range(0.0..=1.0);
            let grade = ((z * cfg.sessions as f64) as usize).min(cfg.sessions - 1);
            let mut x = map.eval(z, grade);
            if cfg.noise > 0.0 {
                for v in &mut x {
                    *v += noise.sample(&mut rng);
                }
            }
            Sample {
                id: format!("s{i:05}"),
                x,
                score: lo + (hi - lo) * z,
            }
        })
        .collect();
    Ok(Dataset {
        kind: InputKind::Raw,
        samples,
        score_range: SYNTHETIC_RANGE,
    })
}

/// A sample index with the label used for training it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub index: usize,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSplit {
    /// Few-shot training samples.
    pub train: Vec<Labeled>,
    pub held_out: Vec<usize>,
}

impl SessionSplit {
    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train.iter().map(|l| l.index).collect();
        v.extend(&self.held_out);
        v.sort_unstable();
        v
    }
}

/// Which samples of a session are scored during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    /// Train and held-out samples of the session.
    #[default]
    Full,
    HeldOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub shots: usize,
    pub sessions: Vec<SessionSplit>,
    /// Extra training pool of the base session (its held-out samples).
    pub finetune: Vec<Labeled>,
    /// Whether labels are normalized to [0, 1].
    pub normalized: bool,
}

impl SessionPlan {
    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Training samples of a session (0-based); the base session includes the fine-tune pool.
    pub fn training(&self, session: usize) -> Vec<Labeled> {
        let mut v = self.sessions[session].train.clone();
        if session == 0 {
            v.extend(&self.finetune);
        }
        v
    }

    pub fn test_set(&self, session: usize, mode: EvalSet) -> Vec<usize> {
        match mode {
            EvalSet::Full => self.sessions[session].all(),
            EvalSet::HeldOut => self.sessions[session].held_out.clone(),
        }
    }

    fn labels_mut(&mut self) -> impl Iterator<Item = &mut Labeled> {
        self.sessions
            .iter_mut()
            .flat_map(|s| s.train.iter_mut())
            .chain(self.finetune.iter_mut())
    }
}

/// Sorts by score, cuts into `sessions` contiguous equal-count grades and
/// draws `shots` training samples per grade.
pub fn grade_split(
    dataset: &Dataset,
    sessions: usize,
    shots: usize,
    seed: u64,
) -> Result<SessionPlan> {
    let n = dataset.len();
    if sessions < 2 {
        return Err(DataError::InvalidConfig {
            field: "sessions",
            reason: format!("need at least 2 sessions, got {sessions}"),
        });
    }
    if n < sessions {
        return Err(DataError::InvalidConfig {
            field: "sessions",
            reason: format!("{n} samples for {sessions} sessions"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&dataset.samples[a], &dataset.samples[b]);
        sa.score
            .total_cmp(&sb.score)
            .then_with(|| sa.id.cmp(&sb.id))
            .then(Ordering::Equal)
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (base, extra) = (n / sessions, n % sessions);
    let mut start = 0;
    let mut splits = Vec::with_capacity(sessions);
    for grade in 0..sessions {
        let size = base + usize::from(grade < extra);
        let members = &order[start..start + size];
        start += size;
        if size < shots {
            return Err(DataError::InsufficientSamples {
                grade: grade + 1,
                available: size,
                shots,
            });
        }
        let mut shuffled = members.to_vec();
        shuffled.shuffle(&mut rng);
        let mut train: Vec<usize> = shuffled[..shots].to_vec();
        let mut held_out: Vec<usize> = shuffled[shots..].to_vec();
        train.sort_unstable();
        held_out.sort_unstable();
        splits.push(SessionSplit {
            train: train
                .into_iter()
                .map(|index| Labeled {
                    index,
                    label: dataset.samples[index].score,
                })
                .collect(),
            held_out,
        });
    }
    let finetune = splits[0]
        .held_out
        .iter()
        .map(|&index| Labeled {
            index,
            label: dataset.samples[index].score,
        })
        .collect();
    Ok(SessionPlan {
        shots,
        sessions: splits,
        finetune,
        normalized: false,
    })
}

/// Affine map of scores onto [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreScaler {
    pub min: f64,
    pub max: f64,
}

impl ScoreScaler {
    /// Fits on `scores`, widened to cover `declared` when given.
    pub fn fit(scores: &[f64], declared: Option<(f64, f64)>) -> Result<Self> {
        let (mut min, mut max) = scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                (lo.min(s), hi.max(s))
            });
        if let Some((lo, hi)) = declared {
            min = min.min(lo);
            max = max.max(hi);
        }
        if max <= min || !min.is_finite() || !max.is_finite() {
            return Err(DataError::DegenerateRange { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * (self.max - self.min) + self.min
    }
}

/// Maps every training label to [0, 1] using a scaler fitted on the base
/// session's training and fine-tune labels plus the declared score range.
pub fn normalize_scores(
    plan: &SessionPlan,
    declared: (f64, f64),
) -> Result<(SessionPlan, ScoreScaler)> {
    let base: Vec<f64> = plan.training(0).iter().map(|l| l.label).collect();
    let scaler = ScoreScaler::fit(&base, Some(declared))?;
    let mut out = plan.clone();
    for l in out.labels_mut() {
        l.label = scaler.normalize(l.label);
    }
    out.normalized = true;
    Ok((out, scaler))
}

/// Adds `N(0, intensity)` to every training label (original units), clamped
/// to `range`. Held-out samples are untouched.
pub fn inject_label_noise(
    plan: &SessionPlan,
    range: (f64, f64),
    intensity: f64,
    seed: u64,
) -> SessionPlan {
    let mut out = plan.clone();
    if intensity <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, intensity).expect("positive std");
    for l in out.labels_mut() {
        l.label = (l.label + noise.sample(&mut rng)).clamp(range.0, range.1);
    }
    out
}

/// Parses the CSV schema `id,score,x0..` (raw inputs) or `id,score,f0..`
/// (precomputed features).
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(&e, 1))?,
        None => {
            return Err(DataError::Parse {
                line: 1,
                reason: "missing header".into(),
            })
        }
    };
    let kind = parse_header(&header)?;
    let width = header.len() - 2;

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(&e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != width + 2 {
            return Err(DataError::InconsistentWidth {
                line,
                expected: width + 2,
                found: rec.len(),
            });
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(DataError::Parse {
                line,
                reason: "empty id".into(),
            });
        }
        let score = parse_float(&rec[1], line, "score")?;
        let x = (0..width)
            .map(|k| parse_float(&rec[k + 2], line, "feature"))
            .collect::<Result<Vec<_>>>()?;
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId { line, id });
        }
        samples.push(Sample { id, x, score });
    }
    if samples.is_empty() {
        return Err(DataError::Parse {
            line: 2,
            reason: "no samples after the header".into(),
        });
    }
    let mut ds = Dataset {
        kind,
        samples,
        score_range: (0.0, 0.0),
    };
    ds.score_range = ds.observed_range();
    Ok(ds)
}

fn csv_error(e: &csv::Error, fallback: u64) -> DataError {
    DataError::Parse {
        line: e.position().map_or(fallback, |p| p.line()),
        reason: e.to_string(),
    }
}

fn parse_header(header: &csv::StringRecord) -> Result<InputKind> {
    let bad = |reason: String| DataError::Parse { line: 1, reason };
    if header.len() < 3 || header[0].trim() != "id" || header[1].trim() != "score" {
        return Err(bad(
            "header must start with `id,score,` and name at least one column".into(),
        ));
    }
    let kind = match header[2].trim().chars().next() {
        Some('x') => InputKind::Raw,
        Some('f') => InputKind::Features,
        _ => return Err(bad(format!("unknown column `{}`", &header[2]))),
    };
    for (k, name) in header.iter().skip(2).enumerate() {
        let expected = format!("{}{k}", kind.prefix());
        if name.trim() != expected {
            return Err(bad(format!(
                "column {} is `{name}`, expected `{expected}`",
                k + 3
            )));
        }
    }
    Ok(kind)
}

fn parse_float(field: &str, line: u64, what: &str) -> Result<f64> {
    let t = field.trim();
    if t.is_empty() {
        return Err(DataError::Parse {
            line,
            reason: format!("missing {what}"),
        });
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::Parse {
            line,
            reason: format!("invalid {what} `{t}`"),
        }),
    }
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text)
}

/// Serializes with shortest round-trip float formatting.
pub fn to_csv(dataset: &Dataset) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let p = dataset.kind.prefix();
    let mut header = vec!["id".to_string(), "score".to_string()];
    header.extend((0..dataset.width()).map(|k| format!("{p}{k}")));
    w.write_record(&header).expect("in-memory write");
    for s in &dataset.samples {
        let mut row = vec![s.id.clone(), s.score.to_string()];
        row.extend(s.x.iter().map(f64::to_string));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
