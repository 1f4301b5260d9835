//! Session-incremental training loop, baselines and evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, EvalSet, Labeled, ScoreScaler, SessionPlan};
use crate::gradcore::{adam_step, AdamConfig, AdamState, GradError, Tape, Tensor2, Var};
use crate::losses::{
    self, Divergence, GraphRegOptions, GraphTerms, LossError, LossTerms, ScoreDistance,
};
use crate::memory::{MemoryBank, MemoryError, Payload, ReplayDraw, Selection};
use crate::metrics::{self, EvalMatrix, ForgettingRule, MetricError};
use crate::models::{self, Encoder, ModelBundle, ModelError, ModelSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("non-finite {term} at session {session}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        term: &'static str,
        session: usize,
        epoch: usize,
        batch: usize,
    },
    #[error("plan has {0} sessions; at least 2 are required")]
    TooFewSessions(usize),
    #[error("session plan labels must be normalized before training")]
    NotNormalized,
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Magr,
    SequentialFt,
    Joint,
    ReplayRaw,
    ReplayFeatureNaive,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Magr,
        Method::SequentialFt,
        Method::Joint,
        Method::ReplayRaw,
        Method::ReplayFeatureNaive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Magr => "magr",
            Method::SequentialFt => "sequential-ft",
            Method::Joint => "joint",
            Method::ReplayRaw => "replay-raw",
            Method::ReplayFeatureNaive => "replay-feature-naive",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrainError::UnknownMethod(s.to_string()))
    }
}

/// Component switches for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the manifold projector: no projector loss, replayed features used as stored.
    pub no_mp: bool,
    /// Projector output replaces the feature instead of being added to it.
    pub no_residual: bool,
    /// Drop the four block terms of the graph regularizer.
    pub no_ii_gr: bool,
    /// Drop the whole-matrix term of the graph regularizer.
    pub no_j_gr: bool,
    /// Mean squared error instead of the row KL divergence.
    pub mse_gr: bool,
    /// Random exemplar selection instead of ordered uniform sampling.
    pub random_sampling: bool,
    pub reverse_kl: bool,
    pub abs_score_distance: bool,
}

/// How gradients from the replayed-feature regression loss reach the projector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplayGradient {
    #[default]
    ThroughProjector,
    StopAtProjector,
}

/// What the projector loss compares the projected frozen features against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorTarget {
    /// Current features as a constant target; only the projector learns from the loss.
    #[default]
    Detached,
    /// Gradient also reaches the encoder through the current features.
    Live,
}

/// Epoch loss watched by early stopping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopMonitor {
    /// Current-session plus replayed regression loss.
    #[default]
    Regression,
    /// Full weighted objective.
    Total,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda_p: f64,
    pub lambda_r: f64,
    /// Replayed features per step.
    pub b1: usize,
    /// Current-session samples per step.
    pub b2: usize,
    pub epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Exemplars stored per session.
    pub memory_per_session: usize,
    #[serde(flatten)]
    pub ablation: Ablation,
    /// Single epoch per session without early stopping.
    pub online: bool,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub replay_draw: ReplayDraw,
    pub replay_gradient: ReplayGradient,
    /// Zero the projector's output layer at the start of every session after
    /// the first, so the projected bank starts as the identity map.
    pub projector_reset: bool,
    pub projector_target: ProjectorTarget,
    pub early_stop_on: StopMonitor,
    pub eval_set: EvalSet,
    pub forgetting_rule: ForgettingRule,
    /// Seed of the randomly initialized reference model.
    pub reference_seed: u64,
    /// Number of reference models averaged (seeds `reference_seed..`).
    pub reference_models: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            method: Method::Magr,
            lambda_p: 1.0,
            lambda_r: 1.0,
            b1: 5,
            b2: 3,
            epochs: 50,
            patience: 10,
            min_delta: 1e-5,
            memory_per_session: 10,
            ablation: Ablation::default(),
            online: false,
            seed: 0,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            replay_draw: ReplayDraw::Uniform,
            replay_gradient: ReplayGradient::ThroughProjector,
            projector_reset: false,
            projector_target: ProjectorTarget::Detached,
            early_stop_on: StopMonitor::Regression,
            eval_set: EvalSet::Full,
            forgetting_rule: ForgettingRule::Spread,
            reference_seed: 1_000_003,
            reference_models: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(TrainError::InvalidConfig { field, reason });
        if self.b1 == 0 {
            return bad("b1", "must be >= 1".into());
        }
        if self.b2 == 0 {
            return bad("b2", "must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1".into());
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return bad(
                "lambda_p",
                format!("{} is not a finite non-negative weight", self.lambda_p),
            );
        }
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return bad(
                "lambda_r",
                format!("{} is not a finite non-negative weight", self.lambda_r),
            );
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} is not a positive learning rate", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("{}", self.weight_decay));
        }
        if self.reference_models == 0 {
            return bad("reference_models", "must be >= 1".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Resolves the method and ablation flags into concrete behaviour.
    pub fn behaviour(&self) -> Behaviour {
        let mut ab = self.ablation;
        if self.method == Method::ReplayFeatureNaive {
            ab.no_mp = true;
            ab.no_ii_gr = true;
            ab.no_j_gr = true;
        }
        let payload = match self.method {
            Method::Magr | Method::ReplayFeatureNaive => Some(Payload::Feature),
            Method::ReplayRaw => Some(Payload::RawInput),
            Method::SequentialFt | Method::Joint => None,
        };
        let feature_replay = payload == Some(Payload::Feature);
        let terms = match (ab.no_ii_gr, ab.no_j_gr) {
            (false, false) => GraphTerms::All,
            (true, false) => GraphTerms::JointOnly,
            (false, true) => GraphTerms::BlocksOnly,
            (true, true) => GraphTerms::None,
        };
        let divergence = if ab.mse_gr {
            Divergence::Mse
        } else if ab.reverse_kl {
            Divergence::ReverseKl
        } else {
            Divergence::Kl
        };
        Behaviour {
            payload,
            projector: feature_replay && !ab.no_mp,
            residual: !ab.no_residual,
            graph: if feature_replay {
                GraphRegOptions {
                    terms,
                    divergence,
                    score_distance: if ab.abs_score_distance {
                        ScoreDistance::Absolute
                    } else {
                        ScoreDistance::Signed
                    },
                }
            } else {
                GraphRegOptions {
                    terms: GraphTerms::None,
                    ..GraphRegOptions::default()
                }
            },
            selection: if ab.random_sampling {
                Selection::Random
            } else {
                Selection::Ordered
            },
        }
    }
}

/// What a configuration actually does during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Behaviour {
    pub payload: Option<Payload>,
    pub projector: bool,
    pub residual: bool,
    pub graph: GraphRegOptions,
    pub selection: Selection,
}

/// Independent random streams, one per purpose.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub order: ChaCha8Rng,
    pub replay: ChaCha8Rng,
    pub eps: ChaCha8Rng,
    pub select: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            order: stream(1),
            replay: stream(2),
            eps: stream(3),
            select: stream(4),
        }
    }

    /// `seed-hex:stream:word-pos` for each stream, `;`-separated.
    pub fn encode(&self) -> String {
        [&self.order, &self.replay, &self.eps, &self.select]
            .iter()
            .map(|r| {
                let seed: String = r.get_seed().iter().map(|b| format!("{b:02x}")).collect();
                format!("{seed}:{}:{}", r.get_stream(), r.get_word_pos())
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn decode(s: &str) -> Option<Self> {
        let parts: Vec<&str> = s.split(';').collect();
        if parts.len() != 4 {
            return None;
        }
        let mut rngs = parts.iter().map(|p| {
            let mut f = p.split(':');
            let hex = f.next()?;
            let stream: u64 = f.next()?.parse().ok()?;
            let pos: u128 = f.next()?.parse().ok()?;
            if f.next().is_some() || hex.len() != 64 || !hex.is_ascii() {
                return None;
            }
            let mut seed = [0u8; 32];
            for (i, b) in seed.iter_mut().enumerate() {
                *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok()?;
            }
            let mut r = ChaCha8Rng::from_seed(seed);
            r.set_stream(stream);
            r.set_word_pos(pos);
            Some(r)
        });
        Some(Self {
            order: rngs.next()??,
            replay: rngs.next()??,
            eps: rngs.next()??,
            select: rngs.next()??,
        })
    }
}

/// Everything carried from one session to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub bank: Option<MemoryBank>,
    /// Completed sessions.
    pub session: usize,
    pub rngs: RngStreams,
}

impl TrainState {
    pub fn new(spec: &ModelSpec, config: &TrainConfig, input_width: usize) -> Result<Self> {
        let bundle = ModelBundle::init(spec, config.seed)?;
        let behaviour = config.behaviour();
        let bank = behaviour.payload.map(|payload| {
            let width = match payload {
                Payload::Feature => bundle.feature_dim(),
                Payload::RawInput => input_width,
            };
            MemoryBank::new(
                config.memory_per_session,
                width,
                payload,
                behaviour.selection,
            )
        });
        Ok(Self {
            bundle,
            bank,
            session: 0,
            rngs: RngStreams::new(config.seed),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub terms: LossTerms,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    /// 1-based session index.
    pub session: usize,
    pub epochs_run: usize,
    pub train_samples: usize,
    /// Evaluation-mode MSE on the session's training labels before and after training.
    pub train_mse_before: f64,
    pub train_mse_after: f64,
    pub steps: Vec<StepLog>,
    pub bank_size: usize,
    #[serde(skip)]
    pub seconds: f64,
}

fn draw_eps(rng: &mut ChaCha8Rng, n: usize) -> Tensor2 {
    Tensor2::column(
        &(0..n)
            .map(|_| rng.sample(StandardNormal))
            .collect::<Vec<f64>>(),
    )
}

fn check_term(
    value: f64,
    term: &'static str,
    session: usize,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss {
            term,
            session,
            epoch,
            batch,
        })
    }
}

struct StepOutcome {
    terms: LossTerms,
    total: f64,
}

struct Optimizers {
    encoder: AdamState,
    projector: AdamState,
    regressor: AdamState,
}

impl Optimizers {
    fn new(bundle: &ModelBundle, cfg: AdamConfig) -> Self {
        let reg: Vec<_> = bundle.regressor.params().cloned().collect();
        Self {
            encoder: AdamState::new(cfg, bundle.encoder.params()),
            projector: AdamState::new(cfg, &bundle.projector.params),
            regressor: AdamState::new(cfg, &reg),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    state: &mut TrainState,
    opt: &mut Optimizers,
    dataset: &Dataset,
    batch: &[Labeled],
    config: &TrainConfig,
    behaviour: &Behaviour,
    at: (usize, usize, usize),
) -> Result<StepOutcome> {
    let (session, epoch, batch_no) = at;
    let indices: Vec<usize> = batch.iter().map(|l| l.index).collect();
    let labels: Vec<f64> = batch.iter().map(|l| l.label).collect();
    let x = dataset.inputs(&indices);

    let bundle = &state.bundle;
    let mut tape = Tape::new();
    let enc_vars = bundle.encoder.bind(&mut tape)?;
    let reg_vars = bundle.regressor.bind(&mut tape)?;
    let xv = tape.leaf(x.clone())?;
    let h = bundle.encoder.forward(&mut tape, &enc_vars, xv)?;
    let eps = draw_eps(&mut state.rngs.eps, indices.len());
    let pred = bundle.regressor.forward(&mut tape, &reg_vars, h, &eps)?;
    let l_d = losses::regression_loss_var(&mut tape, pred.sample, &labels)?;

    let mut terms = LossTerms {
        data: tape.value(l_d).item(),
        ..LossTerms::default()
    };
    let mut objective = l_d;
    let mut proj_vars: Vec<Var> = Vec::new();

    let replay_active = state.bank.as_ref().is_some_and(|b| !b.is_empty());
    if replay_active {
        let bank = state.bank.as_ref().expect("checked");
        let replay = bank.sample_replay(config.b1, config.replay_draw, &mut state.rngs.replay)?;
        let eps_old = draw_eps(&mut state.rngs.eps, replay.scores.len());
        match bank.payload {
            Payload::Feature => {
                if behaviour.projector {
                    proj_vars = bundle.projector.bind(&mut tape)?;
                    let frozen = bundle.frozen_encoder.as_ref().unwrap_or(&bundle.encoder);
                    let h_prev = models::encode(frozen, &x)?;
                    let h_prev = tape.leaf(h_prev)?;
                    let h_pred = models::project_var(
                        &bundle.projector,
                        &mut tape,
                        &proj_vars,
                        h_prev,
                        behaviour.residual,
                    )?;
                    let target = match config.projector_target {
                        ProjectorTarget::Detached => {
                            let v = tape.value(h).clone();
                            tape.leaf(v)?
                        }
                        ProjectorTarget::Live => h,
                    };
                    let l_p = losses::projector_loss_var(&mut tape, target, h_pred)?;
                    terms.projector = tape.value(l_p).item();
                    let weighted = tape.scale(l_p, config.lambda_p)?;
                    objective = tape.add(objective, weighted)?;
                }

                let old = if behaviour.projector {
                    match config.replay_gradient {
                        ReplayGradient::ThroughProjector => {
                            let stored = tape.leaf(replay.features.clone())?;
                            models::project_var(
                                &bundle.projector,
                                &mut tape,
                                &proj_vars,
                                stored,
                                behaviour.residual,
                            )?
                        }
                        ReplayGradient::StopAtProjector => tape.leaf(models::project(
                            &bundle.projector,
                            &replay.features,
                            behaviour.residual,
                        )?)?,
                    }
                } else {
                    tape.leaf(replay.features.clone())?
                };

                let old_pred = bundle
                    .regressor
                    .forward(&mut tape, &reg_vars, old, &eps_old)?;
                let l_m = losses::regression_loss_var(&mut tape, old_pred.sample, &replay.scores)?;
                terms.memory = tape.value(l_m).item();
                objective = tape.add(objective, l_m)?;

                if behaviour.graph.terms != GraphTerms::None {
                    let joint = tape.concat_rows(old, h)?;
                    let mut y = replay.scores.clone();
                    y.extend(&labels);
                    let l_r = losses::graph_reg_loss_var(
                        &mut tape,
                        joint,
                        &y,
                        replay.scores.len(),
                        behaviour.graph,
                    )?;
                    terms.graph = tape.value(l_r).item();
                    let weighted = tape.scale(l_r, config.lambda_r)?;
                    objective = tape.add(objective, weighted)?;
                }
            }
            Payload::RawInput => {
                let xs = tape.leaf(replay.features.clone())?;
                let hs = bundle.encoder.forward(&mut tape, &enc_vars, xs)?;
                let old_pred = bundle
                    .regressor
                    .forward(&mut tape, &reg_vars, hs, &eps_old)?;
                let l_m = losses::regression_loss_var(&mut tape, old_pred.sample, &replay.scores)?;
                terms.memory = tape.value(l_m).item();
                objective = tape.add(objective, l_m)?;
            }
        }
    }

    for (name, v) in [
        ("L_D", terms.data),
        ("L_M", terms.memory),
        ("L_P", terms.projector),
        ("L_R", terms.graph),
    ] {
        check_term(v, name, session, epoch, batch_no)?;
    }
    let total = losses::total_loss(terms, config.lambda_p, config.lambda_r)?;

    let grads = tape.backward_scalar(objective)?;
    let bundle = &mut state.bundle;
    if !enc_vars.is_empty() {
        let g: Vec<Tensor2> = enc_vars.iter().map(|&v| grads.wrt(v)).collect();
        adam_step(bundle.encoder.params_mut(), &g, &mut opt.encoder)?;
    }
    if !proj_vars.is_empty() {
        let g: Vec<Tensor2> = proj_vars.iter().map(|&v| grads.wrt(v)).collect();
        adam_step(&mut bundle.projector.params, &g, &mut opt.projector)?;
    }
    let g: Vec<Tensor2> = reg_vars.iter().map(|&v| grads.wrt(v)).collect();
    let mut reg_params: Vec<_> = bundle.regressor.params().cloned().collect();
    adam_step(&mut reg_params, &g, &mut opt.regressor)?;
    for (dst, src) in bundle.regressor.params_mut().zip(reg_params) {
        *dst = src;
    }
    Ok(StepOutcome { terms, total })
}

fn train_mse(bundle: &ModelBundle, dataset: &Dataset, training: &[Labeled]) -> Result<f64> {
    let idx: Vec<usize> = training.iter().map(|l| l.index).collect();
    let labels: Vec<f64> = training.iter().map(|l| l.label).collect();
    let pred = bundle.predict(&dataset.inputs(&idx))?;
    Ok(losses::regression_loss(&pred, &labels)?)
}

/// Trains one session (1-based `session`) on `training`, then refreshes the
/// memory bank through the projector and stores the session's exemplars.
pub fn train_session(
    state: &mut TrainState,
    dataset: &Dataset,
    training: &[Labeled],
    session: usize,
    config: &TrainConfig,
) -> Result<SessionReport> {
    let started = Instant::now();
    let behaviour = config.behaviour();
    if session >= 2 {
        state.bundle.freeze_copy();
        if config.projector_reset && behaviour.projector {
            state.bundle.projector.zero_output_layer();
        }
    }
    let mut opt = Optimizers::new(&state.bundle, config.adam());
    let train_mse_before = train_mse(&state.bundle, dataset, training)?;

    let epochs = if config.online { 1 } else { config.epochs };
    let mut order: Vec<Labeled> = training.to_vec();
    let mut steps = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 1..=epochs {
        order.shuffle(&mut state.rngs.order);
        let mut sum = 0.0;
        let mut count = 0;
        for (b, chunk) in order.chunks(config.b2).enumerate() {
            let out = train_step(
                state,
                &mut opt,
                dataset,
                chunk,
                config,
                &behaviour,
                (session, epoch, b + 1),
            )?;
            sum += match config.early_stop_on {
                StopMonitor::Regression => out.terms.data + out.terms.memory,
                StopMonitor::Total => out.total,
            };
            count += 1;
            steps.push(StepLog {
                epoch,
                batch: b + 1,
                terms: out.terms,
                total: out.total,
            });
        }
        epochs_run = epoch;
        if config.online {
            continue;
        }
        let epoch_loss = sum / count.max(1) as f64;
        if epoch_loss < best - config.min_delta {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let train_mse_after = train_mse(&state.bundle, dataset, training)?;

    if let Some(bank) = state.bank.as_mut() {
        if bank.payload == Payload::Feature && behaviour.projector && !bank.is_empty() {
            bank.refresh(&state.bundle.projector, behaviour.residual, session)?;
        }
        let idx: Vec<usize> = training.iter().map(|l| l.index).collect();
        let labels: Vec<f64> = training.iter().map(|l| l.label).collect();
        let inputs = dataset.inputs(&idx);
        let stored = match bank.payload {
            Payload::Feature => models::encode(&state.bundle.encoder, &inputs)?,
            Payload::RawInput => inputs,
        };
        bank.store_session(
            &stored,
            &labels,
            &dataset.ids(&idx),
            session,
            &mut state.rngs.select,
        )?;
    }
    state.session = session;

    Ok(SessionReport {
        session,
        epochs_run,
        train_samples: training.len(),
        train_mse_before,
        train_mse_after,
        steps,
        bank_size: state.bank.as_ref().map_or(0, |b| b.len()),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Evaluation-mode predictions in original score units.
pub fn predict_scores(
    bundle: &ModelBundle,
    dataset: &Dataset,
    indices: &[usize],
    scaler: &ScoreScaler,
) -> Result<Vec<f64>> {
    Ok(bundle
        .predict(&dataset.inputs(indices))?
        .into_iter()
        .map(|p| scaler.denormalize(p))
        .collect())
}

/// Spearman correlation; a constant prediction vector scores 0.
pub fn rank_correlation(truth: &[f64], pred: &[f64]) -> Result<f64> {
    match metrics::spearman(truth, pred) {
        Ok(r) => Ok(r),
        Err(MetricError::Degenerate) if metrics::spearman(truth, truth).is_ok() => Ok(0.0),
        Err(e) => Err(e.into()),
    }
}

/// Truth and predictions of one model on one session's test set.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionEval {
    pub session: usize,
    pub indices: Vec<usize>,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
}

pub fn evaluate_session(
    bundle: &ModelBundle,
    dataset: &Dataset,
    plan: &SessionPlan,
    scaler: &ScoreScaler,
    session: usize,
    mode: EvalSet,
) -> Result<SessionEval> {
    let indices = plan.test_set(session - 1, mode);
    let pred = predict_scores(bundle, dataset, &indices, scaler)?;
    Ok(SessionEval {
        session,
        truth: dataset.scores(&indices),
        pred,
        indices,
    })
}

/// Fills row `row` of the matrix with the model's correlations on sessions
/// `1..=upto`, the pooled correlation over them, and the look-ahead entry.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_row(
    bundle: &ModelBundle,
    dataset: &Dataset,
    plan: &SessionPlan,
    scaler: &ScoreScaler,
    row: usize,
    upto: usize,
    mode: EvalSet,
    matrix: &mut EvalMatrix,
) -> Result<Vec<SessionEval>> {
    let mut evals = Vec::with_capacity(upto);
    for j in 1..=upto {
        let e = evaluate_session(bundle, dataset, plan, scaler, j, mode)?;
        matrix.set(row, j, rank_correlation(&e.truth, &e.pred)?);
        evals.push(e);
    }
    let truths: Vec<Vec<f64>> = evals.iter().map(|e| e.truth.clone()).collect();
    let preds: Vec<Vec<f64>> = evals.iter().map(|e| e.pred.clone()).collect();
    let t: Vec<f64> = truths.concat();
    let p: Vec<f64> = preds.concat();
    matrix.set_pooled(row, rank_correlation(&t, &p)?);
    if upto < plan.len() && upto == row {
        let e = evaluate_session(bundle, dataset, plan, scaler, row + 1, mode)?;
        matrix.set_lookahead(row + 1, rank_correlation(&e.truth, &e.pred)?);
    }
    Ok(evals)
}

/// Reference-model correlations for sessions `2..=T`.
pub fn fill_reference(
    spec: &ModelSpec,
    config: &TrainConfig,
    dataset: &Dataset,
    plan: &SessionPlan,
    scaler: &ScoreScaler,
    matrix: &mut EvalMatrix,
) -> Result<()> {
    let refs = (0..config.reference_models as u64)
        .map(|k| ModelBundle::init(spec, config.reference_seed.wrapping_add(k)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for t in 2..=plan.len() {
        let mut sum = 0.0;
        for r in &refs {
            let e = evaluate_session(r, dataset, plan, scaler, t, config.eval_set)?;
            sum += rank_correlation(&e.truth, &e.pred)?;
        }
        matrix.set_reference(t, sum / refs.len() as f64);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub seed: u64,
    pub rho_avg: f64,
    pub rho_aft: Option<f64>,
    pub rho_fwt: Option<f64>,
}

/// Summary metrics of a filled matrix. Forgetting and transfer are absent
/// when the matrix has a single row.
pub fn summarize(
    matrix: &EvalMatrix,
    method: Method,
    seed: u64,
    rule: ForgettingRule,
) -> Result<Summary> {
    let last = matrix.sessions;
    let rho_avg = matrix
        .pooled(last)
        .ok_or_else(|| MetricError::MissingCell(format!("pooled[{last}]")))?;
    let incremental = method != Method::Joint;
    Ok(Summary {
        method,
        seed,
        rho_avg,
        rho_aft: if incremental {
            Some(metrics::rho_aft(matrix, rule)?)
        } else {
            None
        },
        rho_fwt: if incremental {
            Some(metrics::rho_fwt(matrix)?)
        } else {
            None
        },
    })
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub matrix: EvalMatrix,
    pub summary: Summary,
    pub reports: Vec<SessionReport>,
    /// State after each completed training session.
    pub snapshots: Vec<TrainState>,
    /// Final model's evaluation on every session.
    pub final_evals: Vec<SessionEval>,
}

/// Runs every session of `plan` in order (or one pooled session for joint
/// training) and evaluates after each.
pub fn run_continual(
    dataset: &Dataset,
    plan: &SessionPlan,
    scaler: &ScoreScaler,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<RunOutput> {
    config.validate()?;
    if plan.len() < 2 {
        return Err(TrainError::TooFewSessions(plan.len()));
    }
    if !plan.normalized {
        return Err(TrainError::NotNormalized);
    }
    let sessions = plan.len();
    let mut state = TrainState::new(spec, config, dataset.width())?;
    let mut matrix = EvalMatrix::new(sessions);
    fill_reference(spec, config, dataset, plan, scaler, &mut matrix)?;

    let mut reports = Vec::new();
    let mut snapshots = Vec::new();
    let final_evals;
    if config.method == Method::Joint {
        let pooled: Vec<Labeled> = (0..sessions).flat_map(|t| plan.training(t)).collect();
        reports.push(train_session(&mut state, dataset, &pooled, 1, config)?);
        state.session = sessions;
        final_evals = evaluate_row(
            &state.bundle,
            dataset,
            plan,
            scaler,
            sessions,
            sessions,
            config.eval_set,
            &mut matrix,
        )?;
        snapshots.push(state.clone());
    } else {
        let mut last = Vec::new();
        for t in 1..=sessions {
            reports.push(train_session(
                &mut state,
                dataset,
                &plan.training(t - 1),
                t,
                config,
            )?);
            last = evaluate_row(
                &state.bundle,
                dataset,
                plan,
                scaler,
                t,
                t,
                config.eval_set,
                &mut matrix,
            )?;
            snapshots.push(state.clone());
        }
        final_evals = last;
    }
    let summary = summarize(&matrix, config.method, config.seed, config.forgetting_rule)?;
    Ok(RunOutput {
        matrix,
        summary,
        reports,
        snapshots,
        final_evals,
    })
}

/// [`run_continual`] with the method overridden.
pub fn run_baseline(
    method: &str,
    dataset: &Dataset,
    plan: &SessionPlan,
    scaler: &ScoreScaler,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<RunOutput> {
    let method: Method = method.parse()?;
    let config = TrainConfig {
        method,
        ..config.clone()
    };
    run_continual(dataset, plan, scaler, spec, &config)
}

/// Mean squared difference between two encoders' features on `inputs`.
pub fn feature_deviation(before: &Encoder, after: &Encoder, inputs: &Tensor2) -> Result<f64> {
    if before.output_width() != after.output_width() || before.input_width() != after.input_width()
    {
        return Err(GradError::ShapeMismatch {
            op: "feature_deviation",
            lhs: (before.input_width(), before.output_width()),
            rhs: (after.input_width(), after.output_width()),
        }
        .into());
    }
    let a = models::encode(before, inputs)?;
    let b = models::encode(after, inputs)?;
    let mut tape = Tape::new();
    let av = tape.leaf(a)?;
    let bv = tape.leaf(b)?;
    let mse = tape.squared_error(av, bv)?;
    Ok(tape.value(mse).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, grade_split, normalize_scores, SyntheticConfig};

    fn setup(n: usize) -> (Dataset, SessionPlan, ScoreScaler) {
        let ds = generate_synthetic(&SyntheticConfig {
            n,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let plan = grade_split(&ds, 5, 4, 0).unwrap();
        let (plan, scaler) = normalize_scores(&plan, ds.score_range).unwrap();
        (ds, plan, scaler)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            memory_per_session: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!(matches!(
            "ewc".parse::<Method>(),
            Err(TrainError::UnknownMethod(_))
        ));
    }

    #[test]
    fn naive_replay_is_magr_without_projector_and_graph() {
        let naive = TrainConfig {
            method: Method::ReplayFeatureNaive,
            ..TrainConfig::default()
        };
        let stripped = TrainConfig {
            ablation: Ablation {
                no_mp: true,
                no_ii_gr: true,
                no_j_gr: true,
                ..Ablation::default()
            },
            ..TrainConfig::default()
        };
        assert_eq!(naive.behaviour(), stripped.behaviour());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut r = RngStreams::new(9);
        let _: f64 = r.eps.random();
        let back = RngStreams::decode(&r.encode()).unwrap();
        assert_eq!(back, r);
        assert!(RngStreams::decode("nonsense").is_none());
    }

    #[test]
    fn first_session_uses_only_the_data_term() {
        let (ds, plan, _) = setup(60);
        let cfg = quick();
        let mut state = TrainState::new(&ModelSpec::default(), &cfg, ds.width()).unwrap();
        let report = train_session(&mut state, &ds, &plan.training(0), 1, &cfg).unwrap();
        for s in &report.steps {
            assert_eq!(s.total, s.terms.data);
            assert_eq!(
                (s.terms.memory, s.terms.projector, s.terms.graph),
                (0.0, 0.0, 0.0)
            );
        }
        assert_eq!(report.bank_size, 3);
        assert!(state.bundle.frozen_encoder.is_none());
    }

    #[test]
    fn later_sessions_activate_every_term() {
        let (ds, plan, _) = setup(60);
        let cfg = quick();
        let mut state = TrainState::new(&ModelSpec::default(), &cfg, ds.width()).unwrap();
        train_session(&mut state, &ds, &plan.training(0), 1, &cfg).unwrap();
        let report = train_session(&mut state, &ds, &plan.training(1), 2, &cfg).unwrap();
        let s = report.steps[0];
        assert!(s.terms.memory > 0.0 && s.terms.projector > 0.0 && s.terms.graph > 0.0);
        assert_eq!(report.bank_size, 6);
        assert_eq!(state.bank.as_ref().unwrap().refresh_epoch(), 2);
    }

    #[test]
    fn online_mode_runs_one_epoch() {
        let (ds, plan, _) = setup(60);
        let cfg = TrainConfig {
            online: true,
            ..quick()
        };
        let mut state = TrainState::new(&ModelSpec::default(), &cfg, ds.width()).unwrap();
        let r = train_session(&mut state, &ds, &plan.training(0), 1, &cfg).unwrap();
        assert_eq!(r.epochs_run, 1);
    }

    #[test]
    fn feature_deviation_cases() {
        let b = ModelBundle::init(&ModelSpec::default(), 0).unwrap();
        let x = Tensor2::new(4, 32, (0..128).map(|i| (i as f64 * 0.11).sin()).collect()).unwrap();
        assert_eq!(feature_deviation(&b.encoder, &b.encoder, &x).unwrap(), 0.0);

        let mut doubled = b.encoder.clone();
        let n = doubled.params().len();
        for p in &mut doubled.params_mut()[n - 2..] {
            for v in p.value.data_mut() {
                *v *= 2.0;
            }
        }
        let h = models::encode(&b.encoder, &x).unwrap();
        let mean_sq = h.data().iter().map(|v| v * v).sum::<f64>() / h.data().len() as f64;
        let dev = feature_deviation(&b.encoder, &doubled, &x).unwrap();
        assert!((dev - mean_sq).abs() < 1e-12 * mean_sq.max(1.0));

        let other = Encoder::Identity { width: 16 };
        assert!(feature_deviation(&b.encoder, &other, &x).is_err());
    }

    #[test]
    fn run_rejects_unnormalized_plan() {
        let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let plan = grade_split(&ds, 5, 4, 0).unwrap();
        let scaler = ScoreScaler {
            min: 0.0,
            max: 100.0,
        };
        assert!(matches!(
            run_continual(&ds, &plan, &scaler, &ModelSpec::default(), &quick()),
            Err(TrainError::NotNormalized)
        ));
    }
}
