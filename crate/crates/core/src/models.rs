//! Encoder, frozen encoder copy, residual projector and Gaussian score regressor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Param, Tape, Tensor2, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid layer widths {0:?}: need at least two widths, all >= 1")]
    InvalidSpec(Vec<usize>),
    #[error("component widths do not chain: {0}")]
    WidthChain(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Widths of a fully connected stack; ReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(ModelError::InvalidSpec(widths));
        }
        Ok(Self { widths })
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    /// `w0, b0, w1, b1, ...`; weights are `in x out`, biases `1 x out`.
    pub params: Vec<Param>,
}

impl Mlp {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        for (layer, pair) in spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            params.push(Param::new(
                format!("w{layer}"),
                Tensor2::new(fan_in, fan_out, data).expect("sized"),
            ));
            params.push(Param::new(format!("b{layer}"), Tensor2::zeros(1, fan_out)));
        }
        Self { spec, params }
    }

    pub fn layers(&self) -> usize {
        self.spec.widths.len() - 1
    }

    /// Registers every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        Ok(self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect::<std::result::Result<_, _>>()?)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        let (_, cols) = tape.value(x).shape();
        if cols != self.spec.input() {
            return Err(GradError::ShapeMismatch {
                op: "mlp input",
                lhs: tape.value(x).shape(),
                rhs: (self.spec.input(), self.spec.widths[1]),
            }
            .into());
        }
        let mut h = x;
        for layer in 0..self.layers() {
            let z = tape.matmul(h, bound[2 * layer])?;
            h = tape.add(z, bound[2 * layer + 1])?;
            if layer + 1 < self.layers() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass.
    pub fn apply(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let xv = tape.leaf(x.clone())?;
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Rebuilds parameters from a flat vector in [`Mlp::flat`] order.
    pub fn from_flat(spec: MlpSpec, flat: &[f64]) -> Option<Self> {
        let mut params = Vec::new();
        let mut offset = 0;
        for (layer, pair) in spec.widths.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            for (name, rows) in [(format!("w{layer}"), i), (format!("b{layer}"), 1)] {
                let len = rows * o;
                let chunk = flat.get(offset..offset + len)?;
                params.push(Param::new(
                    name,
                    Tensor2::new(rows, o, chunk.to_vec()).ok()?,
                ));
                offset += len;
            }
        }
        (offset == flat.len()).then_some(Self { spec, params })
    }

    /// Sets the final layer's weights and bias to zero.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.value.data_mut().fill(0.0);
        }
    }
}

/// Feature extractor. `Identity` is used when inputs are precomputed features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoder {
    Mlp(Mlp),
    Identity { width: usize },
}

impl Encoder {
    pub fn input_width(&self) -> usize {
        match self {
            Encoder::Mlp(m) => m.spec.input(),
            Encoder::Identity { width } => *width,
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Encoder::Mlp(m) => m.spec.output(),
            Encoder::Identity { width } => *width,
        }
    }

    pub fn params(&self) -> &[Param] {
        match self {
            Encoder::Mlp(m) => &m.params,
            Encoder::Identity { .. } => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        match self {
            Encoder::Mlp(m) => &mut m.params,
            Encoder::Identity { .. } => &mut [],
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        match self {
            Encoder::Mlp(m) => m.bind(tape),
            Encoder::Identity { .. } => Ok(Vec::new()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        match self {
            Encoder::Mlp(m) => m.forward(tape, bound, x),
            Encoder::Identity { width } => {
                let shape = tape.value(x).shape();
                if shape.1 != *width {
                    return Err(GradError::ShapeMismatch {
                        op: "identity encoder",
                        lhs: shape,
                        rhs: (shape.0, *width),
                    }
                    .into());
                }
                Ok(x)
            }
        }
    }
}

/// Encodes a batch of raw inputs (one per row).
pub fn encode(encoder: &Encoder, x: &Tensor2) -> Result<Tensor2> {
    match encoder {
        Encoder::Mlp(m) => m.apply(x),
        Encoder::Identity { .. } => {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone())?;
            let out = encoder.forward(&mut tape, &[], v)?;
            Ok(tape.value(out).clone())
        }
    }
}

/// Records `h + p(h)` (or `p(h)` alone when `residual` is false).
pub fn project_var(
    projector: &Mlp,
    tape: &mut Tape,
    bound: &[Var],
    h: Var,
    residual: bool,
) -> Result<Var> {
    let p = projector.forward(tape, bound, h)?;
    if residual {
        Ok(tape.add(h, p)?)
    } else {
        Ok(p)
    }
}

pub fn project(projector: &Mlp, h: &Tensor2, residual: bool) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let bound = projector.bind(&mut tape)?;
    let hv = tape.leaf(h.clone())?;
    let out = project_var(projector, &mut tape, &bound, hv, residual)?;
    Ok(tape.value(out).clone())
}

/// Inverse softplus of 0.01: the std head starts with a small spread in
/// normalized score units instead of `softplus(0) = 0.69`.
pub const INITIAL_STD_BIAS: f64 = -4.600_165_720_207_926;

/// Shared trunk followed by a mean head and a softplus standard-deviation head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub trunk: Mlp,
    pub mean_head: Mlp,
    pub std_head: Mlp,
}

/// Tape handles for one regressor evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RegressorVars {
    pub mean: Var,
    pub std: Var,
    pub sample: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScorePrediction {
    pub mean: f64,
    pub std: f64,
    pub sample: f64,
}

impl Regressor {
    pub fn init(trunk: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        let hidden = trunk.output();
        let head = MlpSpec::new(vec![hidden, 1])?;
        Ok(Self {
            trunk: Mlp::init(trunk, rng),
            mean_head: Mlp::init(head.clone(), rng),
            std_head: {
                let mut m = Mlp::init(head, rng);
                let n = m.params.len();
                m.params[n - 1].value.data_mut().fill(INITIAL_STD_BIAS);
                m
            },
        })
    }

    pub fn input_width(&self) -> usize {
        self.trunk.spec.input()
    }

    pub fn param_count(&self) -> usize {
        self.trunk.params.len() + self.mean_head.params.len() + self.std_head.params.len()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.trunk
            .params
            .iter()
            .chain(&self.mean_head.params)
            .chain(&self.std_head.params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.trunk
            .params
            .iter_mut()
            .chain(self.mean_head.params.iter_mut())
            .chain(self.std_head.params.iter_mut())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        let mut v = self.trunk.bind(tape)?;
        v.extend(self.mean_head.bind(tape)?);
        v.extend(self.std_head.bind(tape)?);
        Ok(v)
    }

    /// `sample = mean + eps * std`, with `eps` an `n x 1` column.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        h: Var,
        eps: &Tensor2,
    ) -> Result<RegressorVars> {
        let n = tape.value(h).rows();
        if eps.shape() != (n, 1) {
            return Err(GradError::ShapeMismatch {
                op: "regress eps",
                lhs: (n, 1),
                rhs: eps.shape(),
            }
            .into());
        }
        let t = self.trunk.params.len();
        let m = self.mean_head.params.len();
        let trunk = self.trunk.forward(tape, &bound[..t], h)?;
        let trunk = tape.relu(trunk)?;
        let mean = self.mean_head.forward(tape, &bound[t..t + m], trunk)?;
        let raw_std = self.std_head.forward(tape, &bound[t + m..], trunk)?;
        let std = tape.softplus(raw_std)?;
        let sample = if eps.data().iter().all(|&e| e == 0.0) {
            mean
        } else {
            let e = tape.leaf(eps.clone())?;
            let noise = tape.mul(e, std)?;
            tape.add(mean, noise)?
        };
        Ok(RegressorVars { mean, std, sample })
    }
}

/// Per-row score predictions; `eps` of `None` means evaluation mode (all zeros).
pub fn regress(
    regressor: &Regressor,
    h: &Tensor2,
    eps: Option<&[f64]>,
) -> Result<Vec<ScorePrediction>> {
    let eps = match eps {
        Some(e) => Tensor2::column(e),
        None => Tensor2::zeros(h.rows(), 1),
    };
    let mut tape = Tape::new();
    let bound = regressor.bind(&mut tape)?;
    let hv = tape.leaf(h.clone())?;
    let out = regressor.forward(&mut tape, &bound, hv, &eps)?;
    let (mean, std, sample) = (
        tape.value(out.mean),
        tape.value(out.std),
        tape.value(out.sample),
    );
    Ok((0..h.rows())
        .map(|i| ScorePrediction {
            mean: mean.get(i, 0),
            std: std.get(i, 0),
            sample: sample.get(i, 0),
        })
        .collect())
}

/// Layer widths for each component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// `None` selects the identity encoder (precomputed features).
    pub encoder: Option<Vec<usize>>,
    pub projector: Vec<usize>,
    pub regressor_trunk: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            encoder: Some(vec![32, 64, 16]),
            projector: vec![16, 16, 16],
            regressor_trunk: vec![16, 8],
        }
    }
}

impl ModelSpec {
    /// Spec for precomputed features of the given width.
    pub fn for_features(width: usize) -> Self {
        Self {
            encoder: None,
            projector: vec![width, width, width],
            regressor_trunk: vec![width, 8],
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.encoder {
            Some(w) => *w.last().unwrap_or(&0),
            None => self.projector.first().copied().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let proj = MlpSpec::new(self.projector.clone())?;
        let trunk = MlpSpec::new(self.regressor_trunk.clone())?;
        let d = match &self.encoder {
            Some(w) => MlpSpec::new(w.clone())?.output(),
            None => proj.input(),
        };
        if proj.input() != d || proj.output() != d || trunk.input() != d {
            return Err(ModelError::WidthChain(format!(
                "encoder output {d}, projector {:?}, regressor trunk {:?}",
                self.projector, self.regressor_trunk
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub encoder: Encoder,
    /// Copy of the encoder taken at the start of the current session.
    pub frozen_encoder: Option<Encoder>,
    pub projector: Mlp,
    pub regressor: Regressor,
}

impl ModelBundle {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = match &spec.encoder {
            Some(w) => Encoder::Mlp(Mlp::init(MlpSpec::new(w.clone())?, &mut rng)),
            None => Encoder::Identity {
                width: spec.feature_dim(),
            },
        };
        let projector = Mlp::init(MlpSpec::new(spec.projector.clone())?, &mut rng);
        let regressor = Regressor::init(MlpSpec::new(spec.regressor_trunk.clone())?, &mut rng)?;
        Ok(Self {
            encoder,
            frozen_encoder: None,
            projector,
            regressor,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_width()
    }

    /// Stores a value copy of the current encoder as the frozen encoder.
    pub fn freeze_copy(&mut self) {
        self.frozen_encoder = Some(self.encoder.clone());
    }

    /// Evaluation-mode predictions (mean of the score distribution) for raw inputs.
    pub fn predict(&self, x: &Tensor2) -> Result<Vec<f64>> {
        let h = encode(&self.encoder, x)?;
        Ok(regress(&self.regressor, &h, None)?
            .into_iter()
            .map(|p| p.sample)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::grad_check;

    fn bundle(seed: u64) -> ModelBundle {
        ModelBundle::init(&ModelSpec::default(), seed).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        assert_eq!(bundle(7), bundle(7));
        assert_ne!(bundle(7), bundle(8));
    }

    #[test]
    fn init_respects_fan_in_bound_and_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(MlpSpec::new(vec![4, 6, 3]).unwrap(), &mut rng);
        let w0 = &mlp.params[0].value;
        assert!(w0.data().iter().all(|w| w.abs() <= 0.5));
        for p in mlp.params.iter().filter(|p| p.name.starts_with('b')) {
            assert!(p.value.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0]).is_err());
        let bad = ModelSpec {
            projector: vec![16, 16, 8],
            ..ModelSpec::default()
        };
        assert!(matches!(bad.validate(), Err(ModelError::WidthChain(_))));
    }

    #[test]
    fn zero_encoder_zero_input_gives_zero_features() {
        let mut b = bundle(0);
        if let Encoder::Mlp(m) = &mut b.encoder {
            for p in &mut m.params {
                p.value.data_mut().fill(0.0);
            }
        }
        let h = encode(&b.encoder, &Tensor2::zeros(2, 32)).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_shapes_and_duplicate_rows() {
        let b = bundle(0);
        let row: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor2::from_rows(&[row.clone(), row.clone(), row]);
        let h = encode(&b.encoder, &x).unwrap();
        assert_eq!(h.shape(), (3, 16));
        assert_eq!(h.row(0), h.row(1));
        assert_eq!(h.row(1), h.row(2));
        assert!(encode(&b.encoder, &Tensor2::zeros(1, 31)).is_err());
    }

    #[test]
    fn zero_projector_is_identity() {
        let mut b = bundle(3);
        b.projector.zero_output_layer();
        let h = Tensor2::from_rows(&[[0.1; 16], [-2.5; 16]]);
        assert_eq!(project(&b.projector, &h, true).unwrap(), h);
    }

    #[test]
    fn no_residual_returns_projector_output_only() {
        let b = bundle(3);
        let h = Tensor2::from_rows(&[[0.3; 16]]);
        let p = b.projector.apply(&h).unwrap();
        assert_eq!(project(&b.projector, &h, false).unwrap(), p);
        let with = project(&b.projector, &h, true).unwrap();
        assert_eq!(with, h.zip_map(&p, |a, b| a + b));
    }

    #[test]
    fn residual_jacobian_contains_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut proj = Mlp::init(MlpSpec::new(vec![2, 2, 2]).unwrap(), &mut rng);
        proj.zero_output_layer();
        let h = [0.4, -0.9];
        // finite-difference Jacobian of h -> h + p(h) with p = 0
        let step = 1e-6;
        for j in 0..2 {
            let mut plus = h;
            let mut minus = h;
            plus[j] += step;
            minus[j] -= step;
            let fp = project(&proj, &Tensor2::from_rows(&[plus]), true).unwrap();
            let fm = project(&proj, &Tensor2::from_rows(&[minus]), true).unwrap();
            for i in 0..2 {
                let d = (fp.get(0, i) - fm.get(0, i)) / (2.0 * step);
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((d - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn regress_eps_zero_gives_mean() {
        let b = bundle(1);
        let h = Tensor2::from_rows(&[[0.2; 16], [0.5; 16]]);
        for p in regress(&b.regressor, &h, None).unwrap() {
            assert_eq!(p.sample, p.mean);
            assert!(p.std > 0.0);
        }
    }

    #[test]
    fn regress_plugs_in_eps() {
        // with zero trunk/heads the mean is the head bias and std is softplus(bias)
        let mut b = bundle(1);
        for p in b.regressor.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        b.regressor.mean_head.params[1].value.data_mut()[0] = 0.7;
        let sp_inv = (0.5f64.exp() - 1.0).ln();
        b.regressor.std_head.params[1].value.data_mut()[0] = sp_inv;
        let pred = regress(&b.regressor, &Tensor2::zeros(1, 16), Some(&[1.0])).unwrap();
        assert!((pred[0].std - 0.5).abs() < 1e-12);
        assert!((pred[0].sample - 1.2).abs() < 1e-12);
    }

    #[test]
    fn regress_two_draws_share_mean() {
        let b = bundle(2);
        let h = Tensor2::from_rows(&[[0.3; 16]]);
        let a = regress(&b.regressor, &h, Some(&[0.5])).unwrap()[0];
        let c = regress(&b.regressor, &h, Some(&[-1.3])).unwrap()[0];
        assert_eq!(a.mean, c.mean);
        assert_ne!(a.sample, c.sample);
        assert!(regress(&b.regressor, &h, Some(&[0.5, 0.1])).is_err());
    }

    #[test]
    fn freeze_copy_is_a_value_copy() {
        let mut b = bundle(4);
        b.freeze_copy();
        let x = Tensor2::filled(2, 32, 0.25);
        assert_eq!(
            encode(&b.encoder, &x).unwrap(),
            encode(b.frozen_encoder.as_ref().unwrap(), &x).unwrap()
        );
        let before = b.frozen_encoder.clone();
        b.encoder.params_mut()[0].value.data_mut()[0] += 1.0;
        assert_eq!(b.frozen_encoder, before);
        assert_ne!(Some(b.encoder.clone()), b.frozen_encoder);
    }

    #[test]
    fn flat_round_trip() {
        let b = bundle(9);
        let flat = b.projector.flat();
        let back = Mlp::from_flat(b.projector.spec.clone(), &flat).unwrap();
        assert_eq!(back, b.projector);
        assert!(Mlp::from_flat(b.projector.spec.clone(), &flat[1..]).is_none());
    }

    #[test]
    fn regressor_gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reg = Regressor::init(MlpSpec::new(vec![4, 3]).unwrap(), &mut rng).unwrap();
        let h = Tensor2::new(2, 4, (0..8).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let eps = Tensor2::column(&[0.3, -1.1]);
        let mut leaves = vec![h];
        leaves.extend(reg.params().map(|p| p.value.clone()));
        let err = grad_check(
            |tape, v| match reg.forward(tape, &v[1..], v[0], &eps) {
                Ok(out) => Ok(out.sample),
                Err(ModelError::Grad(g)) => Err(g),
                Err(e) => panic!("{e}"),
            },
            &leaves,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
