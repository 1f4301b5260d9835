//! Spearman rank correlation and the continual-learning summaries built on it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("need at least two values, got {0}")]
    TooFew(usize),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("constant input has no rank correlation")]
    Degenerate,
    #[error("missing evaluation cell {0}")]
    MissingCell(String),
    #[error("need at least two sessions")]
    TooFewSessions,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Average-fractional ranks, 1-based; ties share the mean of their positions.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean(i+1 ..= j)
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(p: &[f64], q: &[f64]) -> Result<f64> {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let (mut num, mut dp, mut dq) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        num += (a - mp) * (b - mq);
        dp += (a - mp) * (a - mp);
        dq += (b - mq) * (b - mq);
    }
    if dp == 0.0 || dq == 0.0 {
        return Err(MetricError::Degenerate);
    }
    Ok((num / (dp * dq).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of tie-averaged ranks.
pub fn spearman(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(MetricError::Length(truth.len(), pred.len()));
    }
    if truth.len() < 2 {
        return Err(MetricError::TooFew(truth.len()));
    }
    pearson(&fractional_ranks(truth), &fractional_ranks(pred))
}

/// One Spearman correlation over the union of several sessions' samples.
pub fn rho_avg(truths: &[Vec<f64>], preds: &[Vec<f64>]) -> Result<f64> {
    if truths.len() != preds.len() {
        return Err(MetricError::Length(truths.len(), preds.len()));
    }
    let t: Vec<f64> = truths.iter().flatten().copied().collect();
    let p: Vec<f64> = preds.iter().flatten().copied().collect();
    spearman(&t, &p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForgettingRule {
    /// Spread (max minus min) of each column over every later evaluation.
    #[default]
    Spread,
    /// Best evaluation before the last session minus the final evaluation.
    MaxMinusFinal,
}

/// Correlations `rho[i][j]` of the model after session `i` on session `j`'s
/// test set (1-based), plus look-ahead and reference entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub sessions: usize,
    cells: BTreeMap<(usize, usize), f64>,
    /// `rho[t-1][t]`, keyed by `t`.
    lookahead: BTreeMap<usize, f64>,
    /// Reference-model correlation on session `t`.
    reference: BTreeMap<usize, f64>,
    /// Pooled correlation over sessions `1..=i`, keyed by `i`.
    pooled: BTreeMap<usize, f64>,
}

impl EvalMatrix {
    pub fn new(sessions: usize) -> Self {
        Self {
            sessions,
            ..Self::default()
        }
    }

    /// Records `rho[i][j]`; only `1 <= j <= i <= sessions` is valid.
    pub fn set(&mut self, i: usize, j: usize, rho: f64) {
        assert!(
            j >= 1 && j <= i && i <= self.sessions,
            "invalid cell ({i}, {j})"
        );
        self.cells.insert((i, j), rho);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells.get(&(i, j)).copied()
    }

    pub fn set_lookahead(&mut self, t: usize, rho: f64) {
        assert!(
            t >= 2 && t <= self.sessions,
            "invalid look-ahead session {t}"
        );
        self.lookahead.insert(t, rho);
    }

    pub fn lookahead(&self, t: usize) -> Option<f64> {
        self.lookahead.get(&t).copied()
    }

    pub fn set_reference(&mut self, t: usize, rho: f64) {
        self.reference.insert(t, rho);
    }

    pub fn reference(&self, t: usize) -> Option<f64> {
        self.reference.get(&t).copied()
    }

    pub fn set_pooled(&mut self, i: usize, rho: f64) {
        self.pooled.insert(i, rho);
    }

    pub fn pooled(&self, i: usize) -> Option<f64> {
        self.pooled.get(&i).copied()
    }

    /// Populated cells of row `i`, in column order.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        self.cells
            .range((i, 0)..=(i, usize::MAX))
            .map(|(&(_, j), &v)| (j, v))
            .collect()
    }

    /// Rows that have at least one cell.
    pub fn populated_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.cells.keys().map(|&(i, _)| i).collect();
        rows.dedup();
        rows
    }

    fn cell(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .ok_or_else(|| MetricError::MissingCell(format!("rho[{i}][{j}]")))
    }
}

/// Average forgetting over sessions `1..T-1`.
pub fn rho_aft(m: &EvalMatrix, rule: ForgettingRule) -> Result<f64> {
    let t_max = m.sessions;
    if t_max < 2 {
        return Err(MetricError::TooFewSessions);
    }
    let mut total = 0.0;
    for t in 1..t_max {
        let column = (t..=t_max)
            .map(|i| m.cell(i, t))
            .collect::<Result<Vec<_>>>()?;
        total += match rule {
            ForgettingRule::Spread => {
                let max = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = column.iter().cloned().fold(f64::INFINITY, f64::min);
                max - min
            }
            ForgettingRule::MaxMinusFinal => {
                let best = column[..column.len() - 1]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                best - column[column.len() - 1]
            }
        };
    }
    Ok(total / (t_max - 1) as f64)
}

/// Mean gain of the look-ahead correlation over the reference model.
pub fn rho_fwt(m: &EvalMatrix) -> Result<f64> {
    let t_max = m.sessions;
    if t_max < 2 {
        return Err(MetricError::TooFewSessions);
    }
    let mut total = 0.0;
    for t in 2..=t_max {
        let ahead = m
            .lookahead(t)
            .ok_or_else(|| MetricError::MissingCell(format!("rho[{}][{t}]", t - 1)))?;
        let reference = m
            .reference(t)
            .ok_or_else(|| MetricError::MissingCell(format!("reference[{t}]")))?;
        total += ahead - reference;
    }
    Ok(total / (t_max - 1) as f64)
}
