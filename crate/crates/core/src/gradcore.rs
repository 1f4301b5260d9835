//! Dense row-major matrices, a reverse-mode tape over them, and Adam.
//!
//! Every value on the tape is a [`Tensor2`]. Operations are evaluated eagerly
//! when they are recorded, so the forward value of any [`Var`] is available
//! immediately; [`Tape::backward`] replays the recorded operations in reverse.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower/upper clamp margin applied before `acos`.
pub const ACOS_CLAMP: f64 = 1e-7;
/// Guard added (squared) under the square root of row norms.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("variable {0} has not been evaluated on this tape")]
    BackwardBeforeForward(usize),
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("optimizer state does not match parameter `{0}`")]
    StateMismatch(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GradError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The sole entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// Copies the sub-block starting at `(r0, c0)` with the given shape.
    pub fn slice(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            data.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c0 + cols]);
        }
        Self { rows, cols, data }
    }

    pub fn concat_rows(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(GradError::ShapeMismatch {
                op: "concat_rows",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    Relu(usize),
    Softplus(usize),
    RowNormalize(usize),
    AcosClamped(usize),
    RowSoftmax(usize),
    RowLogSoftmax { input: usize, floor: f64 },
    Mean(usize),
    Sum(usize),
    SquaredError(usize, usize),
    Slice { input: usize, r0: usize, c0: usize },
    ConcatRows(usize, usize),
}

#[derive(Clone, Debug)]
struct TapeNode {
    op: Op,
    value: Tensor2,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<TapeNode>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` did not reach the output.
    pub fn wrt(&self, var: Var) -> Tensor2 {
        assert_eq!(
            var.tape, self.tape,
            "gradient lookup with a foreign variable"
        );
        match self.grads.get(var.index).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.index];
                Tensor2::zeros(r, c)
            }
        }
    }

    /// Whether any gradient flowed into `var`.
    pub fn reached(&self, var: Var) -> bool {
        var.tape == self.tape && self.grads.get(var.index).is_some_and(|g| g.is_some())
    }
}

fn same_shape(op: &'static str, a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GradError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_log_softmax(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn row_softmax(x: &Tensor2) -> Tensor2 {
    row_log_softmax(x).map(f64::exp)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(GradError::BackwardBeforeForward(v.index));
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Tensor2) -> Var {
        let index = self.nodes.len();
        self.nodes.push(TapeNode { op, value });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Forward value of a recorded variable.
    pub fn value(&self, v: Var) -> &Tensor2 {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    /// Records an input. Rejects non-finite entries.
    pub fn leaf(&mut self, value: Tensor2) -> Result<Var> {
        if !value.is_finite() {
            return Err(GradError::NonFinite("leaf".into()));
        }
        Ok(self.push(Op::Leaf, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(Op::MatMul(ia, ib), v))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.transpose();
        Ok(self.push(Op::Transpose(ia), v))
    }

    /// Elementwise sum. `b` may also be a single row, which is broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() == vb.shape() {
            let v = va.zip_map(vb, |x, y| x + y);
            return Ok(self.push(Op::Add(ia, ib), v));
        }
        if vb.rows == 1 && vb.cols == va.cols {
            let mut v = va.clone();
            for r in 0..v.rows {
                for (x, y) in v.row_mut(r).iter_mut().zip(&vb.data) {
                    *x += y;
                }
            }
            return Ok(self.push(Op::AddRow(ia, ib), v));
        }
        Err(GradError::ShapeMismatch {
            op: "add",
            lhs: va.shape(),
            rhs: vb.shape(),
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("sub", va, vb)?;
        let v = va.zip_map(vb, |x, y| x - y);
        Ok(self.push(Op::Sub(ia, ib), v))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ia = self.check(a)?;
        if !k.is_finite() {
            return Err(GradError::NonFinite("scale factor".into()));
        }
        let v = self.nodes[ia].value.map(|x| x * k);
        Ok(self.push(Op::Scale(ia, k), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("mul", va, vb)?;
        let v = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(Op::Mul(ia, ib), v))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(Op::Relu(ia), v))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(softplus);
        Ok(self.push(Op::Softplus(ia), v))
    }

    /// Divides each row by `max(|row|, NORM_GUARD)`.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let mut v = self.nodes[ia].value.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let n = row
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(NORM_GUARD);
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        Ok(self.push(Op::RowNormalize(ia), v))
    }

    /// `acos` of the input clamped to `[-1 + ACOS_CLAMP, 1 - ACOS_CLAMP]`.
    pub fn acos_clamped(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia]
            .value
            .map(|x| x.clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP).acos());
        Ok(self.push(Op::AcosClamped(ia), v))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = row_softmax(&self.nodes[ia].value);
        Ok(self.push(Op::RowSoftmax(ia), v))
    }

    /// Row log-softmax, floored at `ln(floor)`; pass `floor = 0.0` for no floor.
    pub fn row_log_softmax(&mut self, a: Var, floor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let log_floor = if floor > 0.0 {
            floor.ln()
        } else {
            f64::NEG_INFINITY
        };
        let v = row_log_softmax(&self.nodes[ia].value).map(|x| x.max(log_floor));
        Ok(self.push(Op::RowLogSoftmax { input: ia, floor }, v))
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let v = Tensor2::scalar(t.sum() / t.data.len() as f64);
        Ok(self.push(Op::Mean(ia), v))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = Tensor2::scalar(self.nodes[ia].value.sum());
        Ok(self.push(Op::Sum(ia), v))
    }

    /// `mean((a - b)^2)` over all entries, as a 1x1 tensor.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("squared_error", va, vb)?;
        let n = va.data.len() as f64;
        let s: f64 = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::SquaredError(ia, ib), Tensor2::scalar(s / n)))
    }

    pub fn slice(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if r0 + rows > t.rows || c0 + cols > t.cols {
            return Err(GradError::ShapeMismatch {
                op: "slice",
                lhs: t.shape(),
                rhs: (r0 + rows, c0 + cols),
            });
        }
        let v = t.slice(r0, c0, rows, cols);
        Ok(self.push(Op::Slice { input: ia, r0, c0 }, v))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.concat_rows(&self.nodes[ib].value)?;
        Ok(self.push(Op::ConcatRows(ia, ib), v))
    }

    /// Propagates `seed` (the gradient of a scalar objective with respect to
    /// `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: &Tensor2) -> Result<Gradients> {
        let out = self.check(output)?;
        same_shape("backward seed", &self.nodes[out].value, seed)?;
        let mut grads: Vec<Option<Tensor2>> = vec![None; out + 1];
        grads[out] = Some(seed.clone());

        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |idx: usize, d: Tensor2| match &mut grads[idx] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    acc(a, g.matmul(&vb.transpose())?);
                    acc(b, va.transpose().matmul(&g)?);
                }
                Op::Transpose(a) => acc(a, g.transpose()),
                Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let mut db = Tensor2::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(a, g.clone());
                    acc(b, db);
                }
                Op::Sub(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.map(|x| -x));
                }
                Op::Scale(a, k) => acc(a, g.map(|x| x * k)),
                Op::Mul(a, b) => {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    acc(a, g.zip_map(vb, |x, y| x * y));
                    acc(b, g.zip_map(va, |x, y| x * y));
                }
                Op::Relu(a) => {
                    let va = &self.nodes[a].value;
                    acc(a, g.zip_map(va, |d, x| if x > 0.0 { d } else { 0.0 }));
                }
                Op::Softplus(a) => {
                    let va = &self.nodes[a].value;
                    acc(a, g.zip_map(va, |d, x| d * sigmoid(x)));
                }
                Op::RowNormalize(a) => {
                    let x = &self.nodes[a].value;
                    let mut dx = Tensor2::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let xr = x.row(r);
                        let gr = g.row(r);
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n <= NORM_GUARD {
                            for (d, &gj) in dx.row_mut(r).iter_mut().zip(gr) {
                                *d = gj / NORM_GUARD;
                            }
                            continue;
                        }
                        let gx: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = gr[j] / n - gx * xr[j] / (n * n * n);
                        }
                    }
                    acc(a, dx);
                }
                Op::AcosClamped(a) => {
                    let x = &self.nodes[a].value;
                    let (lo, hi) = (-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP);
                    acc(
                        a,
                        g.zip_map(x, |d, v| {
                            if v > lo && v < hi {
                                -d / (1.0 - v * v).sqrt()
                            } else {
                                0.0
                            }
                        }),
                    );
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = Tensor2::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(a, dx);
                }
                Op::RowLogSoftmax { input, floor } => {
                    let x = &self.nodes[input].value;
                    let raw = row_log_softmax(x);
                    let log_floor = if floor > 0.0 {
                        floor.ln()
                    } else {
                        f64::NEG_INFINITY
                    };
                    let mut dx = Tensor2::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let lr = raw.row(r);
                        let gr: Vec<f64> = g
                            .row(r)
                            .iter()
                            .zip(lr)
                            .map(|(&d, &l)| if l < log_floor { 0.0 } else { d })
                            .collect();
                        let total: f64 = gr.iter().sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = gr[j] - lr[j].exp() * total;
                        }
                    }
                    acc(input, dx);
                }
                Op::Mean(a) => {
                    let va = &self.nodes[a].value;
                    let k = g.item() / va.data.len() as f64;
                    acc(a, Tensor2::filled(va.rows, va.cols, k));
                }
                Op::Sum(a) => {
                    let va = &self.nodes[a].value;
                    acc(a, Tensor2::filled(va.rows, va.cols, g.item()));
                }
                Op::SquaredError(a, b) => {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    let k = 2.0 * g.item() / va.data.len() as f64;
                    let da = va.zip_map(vb, |x, y| k * (x - y));
                    let db = da.map(|x| -x);
                    acc(a, da);
                    acc(b, db);
                }
                Op::Slice { input, r0, c0 } => {
                    let src = &self.nodes[input].value;
                    let mut d = Tensor2::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        let start = (r0 + r) * src.cols + c0;
                        d.data[start..start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(input, d);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[a].value.rows;
                    let rb = self.nodes[b].value.rows;
                    acc(a, g.slice(0, 0, ra, g.cols));
                    acc(b, g.slice(ra, 0, rb, g.cols));
                }
            }
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(GradError::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        let shapes = self.nodes[..=out].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }

    /// Backward from a 1x1 output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, &Tensor2::scalar(1.0))
    }
}

/// Denominator floor for relative gradient errors. Below it, differences are
/// judged on an absolute scale near the resolution of f64 finite differences.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Worst entry found by [`grad_check_report`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub rel_error: f64,
    pub leaf: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares tape gradients with fourth-order central finite differences.
///
/// `build` records an expression over the supplied leaves and returns its
/// output; non-scalar outputs are scalarized by summation. Returns the worst
/// relative error over every leaf entry, using `max(|analytic|, |numeric|, GRAD_FLOOR)`
/// as the denominator.
pub fn grad_check<F>(build: F, leaves: &[Tensor2], fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(build, leaves, fd_step)?.rel_error)
}

/// [`grad_check`] with the location of the worst entry.
pub fn grad_check_report<F>(build: F, leaves: &[Tensor2], fd_step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(fd_step > 0.0, "fd_step must be positive");
    let eval = |values: &[Tensor2]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).sum())
    };

    let mut tape = Tape::new();
    let vars = leaves
        .iter()
        .map(|v| tape.leaf(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let (r, c) = tape.value(out).shape();
    let grads = tape.backward(out, &Tensor2::filled(r, c, 1.0))?;

    let mut worst = GradCheckReport::default();
    let mut probe = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for k in 0..leaves[li].data.len() {
            let orig = leaves[li].data[k];
            let mut at = |offset: f64| -> Result<f64> {
                probe[li].data[k] = orig + offset;
                eval(&probe)
            };
            let (p1, m1) = (at(fd_step)?, at(-fd_step)?);
            let (p2, m2) = (at(2.0 * fd_step)?, at(-2.0 * fd_step)?);
            probe[li].data[k] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * fd_step);
            let a = analytic.data[k];
            let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let rel_error = (a - numeric).abs() / denom;
            if rel_error > worst.rel_error {
                worst = GradCheckReport {
                    rel_error,
                    leaf: li,
                    entry: k,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

/// A named, trainable tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor2) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Param]) -> Self {
        let zeros: Vec<Tensor2> = params
            .iter()
            .map(|p| Tensor2::zeros(p.value.rows, p.value.cols))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn first_moments(&self) -> &[Tensor2] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor2] {
        &self.second
    }
}

/// One Adam update with L2 weight decay folded into the gradient.
///
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step(params: &mut [Param], grads: &[Tensor2], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(GradError::StateMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.value.shape() != g.shape() || p.value.shape() != m.shape() {
            return Err(GradError::StateMismatch(p.name.clone()));
        }
        if !g.is_finite() {
            return Err(GradError::NonFiniteGradient(p.name.clone()));
        }
    }

    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i].data;
        let m = &mut state.first[i].data;
        let v = &mut state.second[i].data;
        for (k, w) in p.value.data.iter_mut().enumerate() {
            let gk = g[k] + c.weight_decay * *w;
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}
