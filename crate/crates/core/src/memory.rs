//! Memory bank of replayed exemplars.
//!
//! Exemplars are chosen per session by ordered uniform sampling (sort by
//! score, take rank-uniform positions) or uniformly at random. Stored
//! features are carried to the current feature manifold by applying the
//! projector once at the end of every later session.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::Tensor2;
use crate::models::{self, Mlp, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("cannot select from an empty score set")]
    Empty,
    #[error("requested {m} exemplars from {n} candidates")]
    TooMany { m: usize, n: usize },
    #[error("session {0} is already stored")]
    DuplicateSession(usize),
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("feature width {got} does not match bank width {expected}")]
    Width { expected: usize, got: usize },
    #[error("bank already refreshed for session {0}")]
    AlreadyRefreshed(usize),
    #[error("raw-input banks are never refreshed")]
    RawPayload,
    #[error("{features} features, {scores} scores, {ids} ids")]
    LengthMismatch {
        features: usize,
        scores: usize,
        ids: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MemoryError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Ordered,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplayDraw {
    /// Uniform without replacement over the whole bank.
    #[default]
    Uniform,
    /// Round-robin over stored sessions, uniform within each.
    Stratified,
}

/// What the stored vectors are.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    #[default]
    Feature,
    RawInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub session: usize,
    pub score: f64,
    pub feature: Vec<f64>,
}

fn score_order(scores: &[f64], ids: &[String], a: usize, b: usize) -> Ordering {
    scores[a]
        .total_cmp(&scores[b])
        .then_with(|| ids[a].cmp(&ids[b]))
        .then_with(|| a.cmp(&b))
}

/// Rank positions chosen by ordered uniform sampling.
pub fn ous_ranks(n: usize, m: usize) -> Vec<usize> {
    if m == 1 {
        return vec![(n - 1) / 2];
    }
    (0..m).map(|k| k * (n - 1) / (m - 1)).collect()
}

/// Indices of `m` exemplars spread uniformly over the score ranking.
///
/// Ties in score are broken by id. The result is ordered by score.
pub fn ous_select(scores: &[f64], ids: &[String], m: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if n == 0 {
        return Err(MemoryError::Empty);
    }
    if m == 0 || m > n {
        return Err(MemoryError::TooMany { m, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score_order(scores, ids, a, b));
    Ok(ous_ranks(n, m).into_iter().map(|r| order[r]).collect())
}

/// `m` indices drawn uniformly without replacement, returned in score order.
pub fn random_select(
    scores: &[f64],
    ids: &[String],
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let n = scores.len();
    if n == 0 {
        return Err(MemoryError::Empty);
    }
    if m == 0 || m > n {
        return Err(MemoryError::TooMany { m, n });
    }
    let mut picked = index::sample(rng, n, m).into_vec();
    picked.sort_by(|&a, &b| score_order(scores, ids, a, b));
    Ok(picked)
}

/// Replayed exemplars as a dense batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch {
    pub features: Tensor2,
    pub scores: Vec<f64>,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub capacity: usize,
    pub width: usize,
    pub payload: Payload,
    pub selection: Selection,
    entries: Vec<FeatureRecord>,
    sessions: Vec<usize>,
    refresh_epoch: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, width: usize, payload: Payload, selection: Selection) -> Self {
        Self {
            capacity,
            width,
            payload,
            selection,
            entries: Vec::new(),
            sessions: Vec::new(),
            refresh_epoch: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[FeatureRecord] {
        &self.entries
    }

    pub fn sessions(&self) -> &[usize] {
        &self.sessions
    }

    pub fn refresh_epoch(&self) -> usize {
        self.refresh_epoch
    }

    pub fn count_for(&self, session: usize) -> usize {
        self.entries.iter().filter(|e| e.session == session).count()
    }

    /// Stores `min(capacity, n)` exemplars of one session.
    ///
    /// `rng` is only consulted for random selection.
    pub fn store_session(
        &mut self,
        features: &Tensor2,
        scores: &[f64],
        ids: &[String],
        session: usize,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        if features.rows() != scores.len() || scores.len() != ids.len() {
            return Err(MemoryError::LengthMismatch {
                features: features.rows(),
                scores: scores.len(),
                ids: ids.len(),
            });
        }
        if features.cols() != self.width {
            return Err(MemoryError::Width {
                expected: self.width,
                got: features.cols(),
            });
        }
        if self.sessions.contains(&session) {
            return Err(MemoryError::DuplicateSession(session));
        }
        let m = self.capacity.min(scores.len());
        let picked = if m == 0 {
            Vec::new()
        } else {
            match self.selection {
                Selection::Ordered => ous_select(scores, ids, m)?,
                Selection::Random => random_select(scores, ids, m, rng)?,
            }
        };
        for &i in &picked {
            self.entries.push(FeatureRecord {
                id: ids[i].clone(),
                session,
                score: scores[i],
                feature: features.row(i).to_vec(),
            });
        }
        self.sessions.push(session);
        Ok(picked.len())
    }

    /// Draws `min(b1, len)` records without replacement.
    pub fn sample_replay(
        &self,
        b1: usize,
        draw: ReplayDraw,
        rng: &mut impl Rng,
    ) -> Result<ReplayBatch> {
        if self.entries.is_empty() {
            return Err(MemoryError::EmptyBank);
        }
        let k = b1.min(self.entries.len());
        let indices = match draw {
            ReplayDraw::Uniform => index::sample(rng, self.entries.len(), k).into_vec(),
            ReplayDraw::Stratified => self.stratified(k, rng),
        };
        Ok(self.gather(indices))
    }

    fn stratified(&self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut pools: Vec<Vec<usize>> = self
            .sessions
            .iter()
            .map(|&s| {
                let members: Vec<usize> = (0..self.entries.len())
                    .filter(|&i| self.entries[i].session == s)
                    .collect();
                let order = index::sample(rng, members.len(), members.len()).into_vec();
                order.into_iter().map(|j| members[j]).collect()
            })
            .collect();
        let start = rng.random_range(0..pools.len());
        let mut out = Vec::with_capacity(k);
        let mut p = start;
        while out.len() < k {
            if let Some(i) = pools[p].pop() {
                out.push(i);
            }
            p = (p + 1) % pools.len();
        }
        out
    }

    pub fn gather(&self, indices: Vec<usize>) -> ReplayBatch {
        let rows: Vec<&[f64]> = indices
            .iter()
            .map(|&i| self.entries[i].feature.as_slice())
            .collect();
        let features = if rows.is_empty() {
            Tensor2::zeros(0, self.width)
        } else {
            Tensor2::from_rows(&rows)
        };
        ReplayBatch {
            features,
            scores: indices.iter().map(|&i| self.entries[i].score).collect(),
            indices,
        }
    }

    /// All stored vectors as one matrix.
    pub fn features(&self) -> Tensor2 {
        self.gather((0..self.entries.len()).collect()).features
    }

    /// Replaces every stored feature `h` by `h + p(h)` (or `p(h)` without the
    /// residual link). Allowed once per session.
    pub fn refresh(&mut self, projector: &Mlp, residual: bool, session: usize) -> Result<()> {
        if self.payload == Payload::RawInput {
            return Err(MemoryError::RawPayload);
        }
        if session <= self.refresh_epoch {
            return Err(MemoryError::AlreadyRefreshed(self.refresh_epoch));
        }
        if projector.spec.input() != self.width || projector.spec.output() != self.width {
            return Err(MemoryError::Width {
                expected: self.width,
                got: projector.spec.input(),
            });
        }
        if !self.entries.is_empty() {
            let projected = models::project(projector, &self.features(), residual)?;
            for (i, e) in self.entries.iter_mut().enumerate() {
                e.feature.copy_from_slice(projected.row(i));
            }
        }
        self.refresh_epoch = session;
        Ok(())
    }

    /// Marks the bank as current for `session` without changing features.
    pub fn mark_current(&mut self, session: usize) {
        self.refresh_epoch = self.refresh_epoch.max(session);
    }
}
