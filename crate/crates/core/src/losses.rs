//! Loss terms: score regression, projector alignment and the graph regularizer
//! that aligns angular feature distances with score differences.
//!
//! Each loss has a tape form (`*_var`) used in training and a value form that
//! evaluates on a throwaway tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Tape, Tensor2, Var};

/// Probability floor for the row divergence.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("degenerate joint batch: {old} old rows, {new} new rows")]
    DegenerateBatch { old: usize, new: usize },
    #[error("non-finite loss term {0}")]
    NonFinite(&'static str),
    #[error("negative loss weight for {0}")]
    NegativeWeight(&'static str),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which distance-matrix terms contribute to the regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GraphTerms {
    /// Whole matrix plus the four blocks.
    #[default]
    All,
    /// Four blocks only (joint term dropped).
    BlocksOnly,
    /// Whole matrix only (block terms dropped).
    JointOnly,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// `KL(softmax(A_i) || softmax(S_i))` averaged over rows.
    #[default]
    Kl,
    /// `KL(softmax(S_i) || softmax(A_i))`.
    ReverseKl,
    /// Mean squared error between raw entries.
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDistance {
    /// `y_i - y_j`.
    #[default]
    Signed,
    /// `|y_i - y_j|`.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GraphRegOptions {
    pub terms: GraphTerms,
    pub divergence: Divergence,
    pub score_distance: ScoreDistance,
}

/// Old (replayed) features stacked above new features, with matching scores.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBatch {
    pub old: Tensor2,
    pub new: Tensor2,
    pub scores: Vec<f64>,
}

impl JointBatch {
    pub fn features(&self) -> Result<Tensor2> {
        Ok(self.old.concat_rows(&self.new)?)
    }

    pub fn split(&self) -> usize {
        self.old.rows()
    }
}

/// A square matrix with its old/new block partition.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockedMatrix {
    pub full: Tensor2,
    pub a11: Tensor2,
    pub a12: Tensor2,
    pub a21: Tensor2,
    pub a22: Tensor2,
}

impl BlockedMatrix {
    pub fn partition(full: Tensor2, split: usize) -> Self {
        let n = full.rows();
        let m = n - split;
        Self {
            a11: full.slice(0, 0, split, split),
            a12: full.slice(0, split, split, m),
            a21: full.slice(split, 0, m, split),
            a22: full.slice(split, split, m, m),
            full,
        }
    }

    pub fn reassemble(&self) -> Tensor2 {
        let split = self.a11.rows();
        let n = split + self.a22.rows();
        let mut out = Tensor2::zeros(n, n);
        for (block, r0, c0) in [
            (&self.a11, 0, 0),
            (&self.a12, 0, split),
            (&self.a21, split, 0),
            (&self.a22, split, split),
        ] {
            for r in 0..block.rows() {
                for c in 0..block.cols() {
                    out.set(r0 + r, c0 + c, block.get(r, c));
                }
            }
        }
        out
    }
}

fn scalar_of(tape: &mut Tape, build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let v = build(tape)?;
    Ok(tape.value(v).item())
}

pub fn regression_loss_var(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    if target.is_empty() {
        return Err(LossError::Empty("regression_loss"));
    }
    let y = tape.leaf(Tensor2::column(target))?;
    Ok(tape.squared_error(pred, y)?)
}

/// Mean squared error.
pub fn regression_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(LossError::Empty("regression_loss"));
    }
    let mut tape = Tape::new();
    scalar_of(&mut tape, |t| {
        let p = t.leaf(Tensor2::column(pred))?;
        regression_loss_var(t, p, target)
    })
}

/// Mean over rows of the squared L2 distance between actual and predicted features.
pub fn projector_loss_var(tape: &mut Tape, actual: Var, predicted: Var) -> Result<Var> {
    let rows = tape.value(actual).rows();
    if rows == 0 {
        return Err(LossError::Empty("projector_loss"));
    }
    let d = tape.sub(actual, predicted)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / rows as f64)?)
}

pub fn projector_loss(actual: &Tensor2, predicted: &Tensor2) -> Result<f64> {
    let mut tape = Tape::new();
    scalar_of(&mut tape, |t| {
        let a = t.leaf(actual.clone())?;
        let p = t.leaf(predicted.clone())?;
        projector_loss_var(t, a, p)
    })
}

/// `acos` of the cosine-similarity matrix of the rows of `h`.
pub fn angular_distance_var(tape: &mut Tape, h: Var) -> Result<Var> {
    let unit = tape.row_normalize(h)?;
    let unit_t = tape.transpose(unit)?;
    let cos = tape.matmul(unit, unit_t)?;
    Ok(tape.acos_clamped(cos)?)
}

pub fn angular_distance_matrix(h: &Tensor2) -> Result<Tensor2> {
    if h.rows() == 0 {
        return Err(LossError::Empty("angular_distance_matrix"));
    }
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone())?;
    let a = angular_distance_var(&mut tape, hv)?;
    Ok(tape.value(a).clone())
}

/// `S_ij = y_i - y_j` (or its absolute value).
pub fn score_distance_matrix(y: &[f64], kind: ScoreDistance) -> Tensor2 {
    let n = y.len();
    let mut s = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = y[i] - y[j];
            s.set(
                i,
                j,
                match kind {
                    ScoreDistance::Signed => d,
                    ScoreDistance::Absolute => d.abs(),
                },
            );
        }
    }
    s
}

/// `(1/n) * sum_i KL(softmax(P_i) || softmax(Q_i))`.
pub fn kl_row_divergence_var(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let (pv, qv) = (tape.value(p), tape.value(q));
    if pv.shape() != qv.shape() {
        return Err(GradError::ShapeMismatch {
            op: "kl_row_divergence",
            lhs: pv.shape(),
            rhs: qv.shape(),
        }
        .into());
    }
    let rows = pv.rows();
    if rows == 0 {
        return Err(LossError::Empty("kl_row_divergence"));
    }
    let log_p = tape.row_log_softmax(p, PROB_FLOOR)?;
    let log_q = tape.row_log_softmax(q, PROB_FLOOR)?;
    let prob_p = tape.row_softmax(p)?;
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(prob_p, diff)?;
    let s = tape.sum(terms)?;
    Ok(tape.scale(s, 1.0 / rows as f64)?)
}

pub fn kl_row_divergence(p: &Tensor2, q: &Tensor2) -> Result<f64> {
    let mut tape = Tape::new();
    scalar_of(&mut tape, |t| {
        let pv = t.leaf(p.clone())?;
        let qv = t.leaf(q.clone())?;
        kl_row_divergence_var(t, pv, qv)
    })
}

fn divergence_var(tape: &mut Tape, a: Var, s: Var, kind: Divergence) -> Result<Var> {
    match kind {
        Divergence::Kl => kl_row_divergence_var(tape, a, s),
        Divergence::ReverseKl => kl_row_divergence_var(tape, s, a),
        Divergence::Mse => Ok(tape.squared_error(a, s)?),
    }
}

/// Graph regularizer over `h` (old rows first, `split` of them) and scores `y`.
///
/// Returns the divergence between the angular distance matrix and the score
/// distance matrix on the whole matrix plus each of the four old/new blocks,
/// subject to `opts.terms`.
pub fn graph_reg_loss_var(
    tape: &mut Tape,
    h: Var,
    y: &[f64],
    split: usize,
    opts: GraphRegOptions,
) -> Result<Var> {
    let n = tape.value(h).rows();
    if split == 0 || split >= n {
        return Err(LossError::DegenerateBatch {
            old: split,
            new: n.saturating_sub(split),
        });
    }
    if y.len() != n {
        return Err(GradError::ShapeMismatch {
            op: "graph_reg scores",
            lhs: (n, 1),
            rhs: (y.len(), 1),
        }
        .into());
    }
    let a = angular_distance_var(tape, h)?;
    let s = tape.leaf(score_distance_matrix(y, opts.score_distance))?;
    distance_alignment_var(tape, a, s, split, opts)
}

/// Divergence terms between a feature distance matrix `a` and a score
/// distance matrix `s`, both with `split` old rows first.
pub fn distance_alignment_var(
    tape: &mut Tape,
    a: Var,
    s: Var,
    split: usize,
    opts: GraphRegOptions,
) -> Result<Var> {
    let (n, cols) = tape.value(a).shape();
    if tape.value(s).shape() != (n, cols) || n != cols {
        return Err(GradError::ShapeMismatch {
            op: "distance_alignment",
            lhs: (n, cols),
            rhs: tape.value(s).shape(),
        }
        .into());
    }
    if split == 0 || split >= n {
        return Err(LossError::DegenerateBatch {
            old: split,
            new: n.saturating_sub(split),
        });
    }
    let mut terms = Vec::with_capacity(5);
    if matches!(opts.terms, GraphTerms::All | GraphTerms::JointOnly) {
        terms.push(divergence_var(tape, a, s, opts.divergence)?);
    }
    if matches!(opts.terms, GraphTerms::All | GraphTerms::BlocksOnly) {
        let m = n - split;
        for (r0, c0, rows, cols) in [
            (0, 0, split, split),
            (0, split, split, m),
            (split, 0, m, split),
            (split, split, m, m),
        ] {
            let ab = tape.slice(a, r0, c0, rows, cols)?;
            let sb = tape.slice(s, r0, c0, rows, cols)?;
            terms.push(divergence_var(tape, ab, sb, opts.divergence)?);
        }
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => {
            let z = tape.leaf(Tensor2::scalar(0.0))?;
            return Ok(z);
        }
    };
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// [`distance_alignment_var`] on plain matrices.
pub fn distance_alignment(
    a: &Tensor2,
    s: &Tensor2,
    split: usize,
    opts: GraphRegOptions,
) -> Result<f64> {
    let mut tape = Tape::new();
    scalar_of(&mut tape, |t| {
        let av = t.leaf(a.clone())?;
        let sv = t.leaf(s.clone())?;
        distance_alignment_var(t, av, sv, split, opts)
    })
}

pub fn graph_reg_loss(batch: &JointBatch, opts: GraphRegOptions) -> Result<f64> {
    if batch.old.rows() == 0 || batch.new.rows() == 0 {
        return Err(LossError::DegenerateBatch {
            old: batch.old.rows(),
            new: batch.new.rows(),
        });
    }
    let h = batch.features()?;
    let mut tape = Tape::new();
    scalar_of(&mut tape, |t| {
        let hv = t.leaf(h)?;
        graph_reg_loss_var(t, hv, &batch.scores, batch.split(), opts)
    })
}

/// Loss components of one training step; inactive terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub data: f64,
    pub memory: f64,
    pub projector: f64,
    pub graph: f64,
}

/// `L_D + L_M + lambda_p * L_P + lambda_r * L_R`.
pub fn total_loss(terms: LossTerms, lambda_p: f64, lambda_r: f64) -> Result<f64> {
    for (name, v) in [
        ("L_D", terms.data),
        ("L_M", terms.memory),
        ("L_P", terms.projector),
        ("L_R", terms.graph),
        ("lambda_P", lambda_p),
        ("lambda_R", lambda_r),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    if lambda_p < 0.0 {
        return Err(LossError::NegativeWeight("lambda_P"));
    }
    if lambda_r < 0.0 {
        return Err(LossError::NegativeWeight("lambda_R"));
    }
    Ok(terms.data + terms.memory + lambda_p * terms.projector + lambda_r * terms.graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    #[test]
    fn regression_loss_examples() {
        assert_eq!(regression_loss(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(regression_loss(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(regression_loss(&[0.5], &[0.0]).unwrap(), 0.25);
        assert_eq!(
            regression_loss(&[], &[]),
            Err(LossError::Empty("regression_loss"))
        );
    }

    #[test]
    fn projector_loss_examples() {
        let a = Tensor2::from_rows(&[[1.0, 2.0]]);
        assert_eq!(projector_loss(&a, &a).unwrap(), 0.0);
        let diff = Tensor2::from_rows(&[[3.0, 4.0]]);
        assert_eq!(projector_loss(&diff, &Tensor2::zeros(1, 2)).unwrap(), 25.0);
        let two = Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(projector_loss(&two, &Tensor2::zeros(2, 2)).unwrap(), 1.0);
        assert!(projector_loss(&two, &Tensor2::zeros(2, 3)).is_err());
    }

    #[test]
    fn angular_distance_examples() {
        let a = angular_distance_matrix(&Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        assert!((a.get(0, 1) - FRAC_PI_2).abs() < 1e-12);
        let a = angular_distance_matrix(&Tensor2::from_rows(&[[1.0, 2.0], [-1.0, -2.0]])).unwrap();
        // antipodal rows sit at the clamp boundary
        assert!((a.get(0, 1) - PI).abs() < 1e-3);
        let a = angular_distance_matrix(&Tensor2::from_rows(&[[1.0, 0.0], [1.0, 1.0]])).unwrap();
        assert!((a.get(0, 1) - FRAC_PI_4).abs() < 1e-12);
        assert!(a.get(0, 0) <= (1.0f64 - 1e-7).acos() + 1e-15);
    }

    #[test]
    fn zero_rows_stay_finite() {
        let a = angular_distance_matrix(&Tensor2::from_rows(&[[0.0, 0.0], [1.0, 0.0]])).unwrap();
        assert!(a.is_finite());
        assert!((a.get(0, 1) - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn score_distance_examples() {
        let s = score_distance_matrix(&[1.0, 3.0], ScoreDistance::Signed);
        assert_eq!(s, Tensor2::from_rows(&[[0.0, -2.0], [2.0, 0.0]]));
        let s = score_distance_matrix(&[0.4; 3], ScoreDistance::Signed);
        assert!(s.data().iter().all(|&v| v == 0.0));
        let s = score_distance_matrix(&[0.0, 1.0, 2.0], ScoreDistance::Signed);
        assert_eq!(s.get(0, 2), -2.0);
        assert_eq!(s.get(2, 0), 2.0);
        let s = score_distance_matrix(&[0.0, 1.0, 2.0], ScoreDistance::Absolute);
        assert_eq!(s.get(0, 2), 2.0);
    }

    #[test]
    fn kl_examples() {
        let p = Tensor2::from_rows(&[[0.3, -1.0], [2.0, 0.5]]);
        assert_eq!(kl_row_divergence(&p, &p).unwrap(), 0.0);

        let p = Tensor2::from_rows(&[[0.0, 0.0]]);
        let q = Tensor2::from_rows(&[[0.0, 2f64.ln()]]);
        let expected = 0.5 * (0.5f64 / (1.0 / 3.0)).ln() + 0.5 * (0.5f64 / (2.0 / 3.0)).ln();
        let got = kl_row_divergence(&p, &q).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.0589).abs() < 1e-4);

        let q = Tensor2::from_rows(&[[0.1, 0.7], [0.2, -0.4]]);
        let p = Tensor2::from_rows(&[[0.3, -1.0], [2.0, 0.5]]);
        let shifted = Tensor2::from_rows(&[[5.3, 4.0], [2.0, 0.5]]);
        let a = kl_row_divergence(&p, &q).unwrap();
        let b = kl_row_divergence(&shifted, &q).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn graph_reg_is_zero_when_distances_match_scores() {
        // all features identical: A is the clamp floor everywhere; choose scores
        // so S has a constant row pattern matching A up to a per-row shift
        let h = Tensor2::from_rows(&[[1.0, 1.0]; 4]);
        let batch = JointBatch {
            old: h.slice(0, 0, 2, 2),
            new: h.slice(2, 0, 2, 2),
            scores: vec![0.5; 4],
        };
        let opts = GraphRegOptions::default();
        assert!(graph_reg_loss(&batch, opts).unwrap().abs() < 1e-15);
    }

    #[test]
    fn graph_reg_degenerate_batch() {
        let batch = JointBatch {
            old: Tensor2::zeros(0, 2),
            new: Tensor2::filled(2, 2, 1.0),
            scores: vec![0.1, 0.2],
        };
        assert_eq!(
            graph_reg_loss(&batch, GraphRegOptions::default()),
            Err(LossError::DegenerateBatch { old: 0, new: 2 })
        );
    }

    #[test]
    fn total_loss_examples() {
        let only_data = LossTerms {
            data: 0.37,
            ..LossTerms::default()
        };
        assert_eq!(total_loss(only_data, 1.0, 1.0).unwrap(), 0.37);
        let ones = LossTerms {
            data: 1.0,
            memory: 1.0,
            projector: 1.0,
            graph: 1.0,
        };
        assert_eq!(total_loss(ones, 1.0, 1.0).unwrap(), 4.0);
        assert_eq!(total_loss(ones, 0.0, 0.0).unwrap(), 2.0);
        let bad = LossTerms {
            graph: f64::NAN,
            ..ones
        };
        assert_eq!(total_loss(bad, 1.0, 1.0), Err(LossError::NonFinite("L_R")));
    }

    #[test]
    fn blocks_tile_the_full_matrix() {
        let full = Tensor2::new(5, 5, (0..25).map(|i| i as f64 * 0.1).collect()).unwrap();
        let b = BlockedMatrix::partition(full.clone(), 2);
        assert_eq!(b.a11.shape(), (2, 2));
        assert_eq!(b.a12.shape(), (2, 3));
        assert_eq!(b.a21.shape(), (3, 2));
        assert_eq!(b.a22.shape(), (3, 3));
        assert_eq!(b.reassemble(), full);
    }
}
