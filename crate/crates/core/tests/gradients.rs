use magr_core::gradcore::{grad_check, grad_check_report, GradError, Tape, Tensor2, Var};
use magr_core::losses::{self, Divergence, GraphRegOptions, GraphTerms, ScoreDistance};
use magr_core::models::{self, Mlp, MlpSpec, Regressor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const B1: usize = 5;
const B2: usize = 3;
const D: usize = 16;
const FD: f64 = 3e-4;
/// Inputs are redrawn until every ReLU pre-activation clears this margin, so
/// the finite-difference stencil never straddles a kink.
const KINK_MARGIN: f64 = 2e-3;
const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor2::new(rows, cols, data).unwrap()
}

fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn lift<T>(r: Result<T, impl Into<LiftErr>>) -> Result<T, GradError> {
    r.map_err(|e| e.into().0)
}

struct LiftErr(GradError);

impl From<losses::LossError> for LiftErr {
    fn from(e: losses::LossError) -> Self {
        match e {
            losses::LossError::Grad(g) => LiftErr(g),
            other => panic!("{other}"),
        }
    }
}

impl From<models::ModelError> for LiftErr {
    fn from(e: models::ModelError) -> Self {
        match e {
            models::ModelError::Grad(g) => LiftErr(g),
            other => panic!("{other}"),
        }
    }
}

/// Leaves for a small regressor, projector and a batch of features.
struct Setup {
    regressor: Regressor,
    projector: Mlp,
    eps_new: Tensor2,
    eps_old: Tensor2,
    y_new: Vec<f64>,
    y_old: Vec<f64>,
    features: Vec<Tensor2>,
    n_reg: usize,
    n_proj: usize,
}

/// Which parameter groups join the feature leaves in a check.
#[derive(Clone, Copy)]
enum Leaves {
    Features,
    Regressor,
    Projector,
    Both,
}

impl Setup {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regressor = Regressor::init(MlpSpec::new(vec![D, 8]).unwrap(), &mut rng).unwrap();
        let mut projector = Mlp::init(MlpSpec::new(vec![D, D, D]).unwrap(), &mut rng);
        // Nonzero biases keep every layer's gradient informative.
        for p in projector.params.iter_mut() {
            for v in p.value.data_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        let (h_new, h_old, h_prev) = loop {
            let h_new = random(&mut rng, B2, D);
            let h_old = random(&mut rng, B1, D);
            let h_prev = random(&mut rng, B2, D);
            if clear_of_kinks(&regressor, &projector, &[&h_new, &h_old, &h_prev]) {
                break (h_new, h_old, h_prev);
            }
        };
        let n_reg = regressor.param_count();
        let n_proj = projector.params.len();
        Self {
            eps_new: Tensor2::column(&labels(&mut rng, B2)),
            eps_old: Tensor2::column(&labels(&mut rng, B1)),
            y_new: labels(&mut rng, B2),
            y_old: labels(&mut rng, B1),
            regressor,
            projector,
            features: vec![h_new, h_old, h_prev],
            n_reg,
            n_proj,
        }
    }

    fn leaves(&self, which: Leaves) -> Vec<Tensor2> {
        let mut out = self.features.clone();
        if matches!(which, Leaves::Regressor | Leaves::Both) {
            out.extend(self.regressor.params().map(|p| p.value.clone()));
        }
        if matches!(which, Leaves::Projector | Leaves::Both) {
            out.extend(self.projector.params.iter().map(|p| p.value.clone()));
        }
        out
    }

    fn reg<'a>(&self, v: &'a [Var]) -> &'a [Var] {
        &v[3..3 + self.n_reg]
    }

    fn proj<'a>(&self, v: &'a [Var]) -> &'a [Var] {
        if v.len() == 3 {
            return &[];
        }
        let start = if v.len() == 3 + self.n_proj {
            3
        } else {
            3 + self.n_reg
        };
        &v[start..start + self.n_proj]
    }

    /// Projects `h`, binding the projector as constants when its parameters are not leaves.
    fn project(&self, t: &mut Tape, v: &[Var], h: Var, residual: bool) -> Result<Var, GradError> {
        let bound = match self.proj(v) {
            [] => lift(self.projector.bind(t))?,
            p => p.to_vec(),
        };
        lift(models::project_var(&self.projector, t, &bound, h, residual))
    }
}

fn first_layer(mlp: &Mlp) -> Mlp {
    let (i, o) = (mlp.spec.widths[0], mlp.spec.widths[1]);
    Mlp::from_flat(MlpSpec::new(vec![i, o]).unwrap(), &mlp.flat()[..i * o + o]).unwrap()
}

fn clear_of_kinks(regressor: &Regressor, projector: &Mlp, batches: &[&Tensor2]) -> bool {
    let hidden = first_layer(projector);
    let clear = |z: Tensor2| z.data().iter().all(|v| v.abs() > KINK_MARGIN);
    batches.iter().all(|&h| {
        let mut inputs = vec![h.clone()];
        for residual in [true, false] {
            inputs.push(models::project(projector, h, residual).unwrap());
        }
        clear(hidden.apply(h).unwrap())
            && inputs
                .into_iter()
                .all(|x| clear(regressor.trunk.apply(&x).unwrap()))
    })
}

fn check(
    setup: &Setup,
    which: Leaves,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var, GradError>,
) -> f64 {
    let r = grad_check_report(build, &setup.leaves(which), FD).unwrap();
    if r.rel_error >= TOL {
        eprintln!("{r:?}");
    }
    r.rel_error
}

#[test]
fn data_loss_gradient() {
    for seed in 0..10 {
        let s = Setup::new(seed);
        let err = check(&s, Leaves::Regressor, |t, v| {
            let out = lift(s.regressor.forward(t, s.reg(v), v[0], &s.eps_new))?;
            lift(losses::regression_loss_var(t, out.sample, &s.y_new))
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn memory_loss_gradient_through_projection() {
    for residual in [true, false] {
        for seed in 0..10 {
            let s = Setup::new(seed);
            let err = check(&s, Leaves::Both, |t, v| {
                let old = s.project(t, v, v[1], residual)?;
                let out = lift(s.regressor.forward(t, s.reg(v), old, &s.eps_old))?;
                lift(losses::regression_loss_var(t, out.sample, &s.y_old))
            });
            assert!(err < TOL, "residual {residual} seed {seed}: {err}");
        }
    }
}

#[test]
fn memory_loss_gradient_without_projection() {
    for seed in 0..10 {
        let s = Setup::new(seed);
        let err = check(&s, Leaves::Regressor, |t, v| {
            let out = lift(s.regressor.forward(t, s.reg(v), v[1], &s.eps_old))?;
            lift(losses::regression_loss_var(t, out.sample, &s.y_old))
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn projector_loss_gradient() {
    for residual in [true, false] {
        for seed in 0..10 {
            let s = Setup::new(seed);
            let err = check(&s, Leaves::Projector, |t, v| {
                let predicted = s.project(t, v, v[2], residual)?;
                lift(losses::projector_loss_var(t, v[0], predicted))
            });
            assert!(err < TOL, "residual {residual} seed {seed}: {err}");
        }
    }
}

fn graph_variants() -> Vec<GraphRegOptions> {
    let mut out = Vec::new();
    for terms in [
        GraphTerms::All,
        GraphTerms::BlocksOnly,
        GraphTerms::JointOnly,
    ] {
        for divergence in [Divergence::Kl, Divergence::ReverseKl, Divergence::Mse] {
            for score_distance in [ScoreDistance::Signed, ScoreDistance::Absolute] {
                out.push(GraphRegOptions {
                    terms,
                    divergence,
                    score_distance,
                });
            }
        }
    }
    out
}

#[test]
fn graph_loss_gradient_every_variant() {
    for opts in graph_variants() {
        for residual in [true, false] {
            for seed in 0..10 {
                let s = Setup::new(seed);
                let mut y = s.y_old.clone();
                y.extend(&s.y_new);
                let err = check(&s, Leaves::Features, |t, v| {
                    let old = s.project(t, v, v[1], residual)?;
                    let joint = t.concat_rows(old, v[0])?;
                    lift(losses::graph_reg_loss_var(t, joint, &y, B1, opts))
                });
                assert!(err < TOL, "{opts:?} residual {residual} seed {seed}: {err}");
            }
        }
    }
}

#[test]
fn graph_loss_gradient_wrt_projector() {
    for residual in [true, false] {
        for seed in 0..10 {
            let s = Setup::new(seed);
            let mut y = s.y_old.clone();
            y.extend(&s.y_new);
            let err = check(&s, Leaves::Projector, |t, v| {
                let old = s.project(t, v, v[1], residual)?;
                let joint = t.concat_rows(old, v[0])?;
                lift(losses::graph_reg_loss_var(
                    t,
                    joint,
                    &y,
                    B1,
                    GraphRegOptions::default(),
                ))
            });
            assert!(err < TOL, "residual {residual} seed {seed}: {err}");
        }
    }
}

#[test]
fn graph_loss_gradient_unprojected() {
    for opts in graph_variants() {
        for seed in 0..10 {
            let s = Setup::new(seed);
            let mut y = s.y_old.clone();
            y.extend(&s.y_new);
            let err = check(&s, Leaves::Features, |t, v| {
                let joint = t.concat_rows(v[1], v[0])?;
                lift(losses::graph_reg_loss_var(t, joint, &y, B1, opts))
            });
            assert!(err < TOL, "{opts:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn combined_objective_gradient() {
    for seed in 0..10 {
        let s = Setup::new(seed);
        let mut y = s.y_old.clone();
        y.extend(&s.y_new);
        let err = check(&s, Leaves::Both, |t, v| {
            let new = lift(s.regressor.forward(t, s.reg(v), v[0], &s.eps_new))?;
            let l_d = lift(losses::regression_loss_var(t, new.sample, &s.y_new))?;
            let predicted = s.project(t, v, v[2], true)?;
            let l_p = lift(losses::projector_loss_var(t, v[0], predicted))?;
            let old = s.project(t, v, v[1], true)?;
            let out = lift(s.regressor.forward(t, s.reg(v), old, &s.eps_old))?;
            let l_m = lift(losses::regression_loss_var(t, out.sample, &s.y_old))?;
            let joint = t.concat_rows(old, v[0])?;
            let l_r = lift(losses::graph_reg_loss_var(
                t,
                joint,
                &y,
                B1,
                GraphRegOptions::default(),
            ))?;
            let a = t.add(l_d, l_m)?;
            let b = t.add(l_p, l_r)?;
            t.add(a, b)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

/// Entries bounded away from zero, keeping row norms clear of the normalization guard.
fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
    let entry = (0.2f64..2.0, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m });
    prop::collection::vec(entry, rows * cols)
        .prop_map(move |d| Tensor2::new(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_shapes_match_values(a in matrix(3, 4), b in matrix(4, 2)) {
        let mut t = Tape::new();
        let av = t.leaf(a.clone()).unwrap();
        let bv = t.leaf(b.clone()).unwrap();
        let p = t.matmul(av, bv).unwrap();
        let r = t.relu(p).unwrap();
        let s = t.softplus(r).unwrap();
        let out = t.sum(s).unwrap();
        let g = t.backward_scalar(out).unwrap();
        prop_assert_eq!(g.wrt(av).shape(), a.shape());
        prop_assert_eq!(g.wrt(bv).shape(), b.shape());
    }

    #[test]
    fn smooth_ops_pass_grad_check(a in matrix(3, 4), b in matrix(3, 4)) {
        let err = grad_check(
            |t, v| {
                let n = t.row_normalize(v[0])?;
                let s = t.row_softmax(v[1])?;
                let m = t.mul(n, s)?;
                let sp = t.softplus(m)?;
                let l = t.row_log_softmax(sp, 1e-12)?;
                t.mean(l)
            },
            &[a, b],
            FD,
        )
        .unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn linearity_of_backward_seed(a in matrix(2, 3), k in 0.1f64..5.0) {
        let mut t = Tape::new();
        let av = t.leaf(a).unwrap();
        let sq = t.mul(av, av).unwrap();
        let g1 = t.backward(sq, &Tensor2::filled(2, 3, 1.0)).unwrap().wrt(av);
        let gk = t.backward(sq, &Tensor2::filled(2, 3, k)).unwrap().wrt(av);
        for (x, y) in g1.data().iter().zip(gk.data()) {
            prop_assert!((x * k - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}
