use magr_core::checkpoint::Checkpoint;
use magr_core::data::{self, EvalSet};
use magr_core::experiment::{self, ExperimentConfig, Prepared};
use magr_core::memory::Payload;
use magr_core::metrics::EvalMatrix;
use magr_core::models::Encoder;
use magr_core::trainer::{self, evaluate_row, train_session, Method, TrainState};

fn config(method: Method, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.synthetic.n = 150;
    c.data.shots = 6;
    c.train.method = method;
    c.train.epochs = 6;
    c.train.seed = seed;
    c
}

fn prepared(c: &ExperimentConfig) -> Prepared {
    experiment::prepare(c).unwrap()
}

#[test]
fn first_session_objective_is_the_data_term() {
    for method in [Method::Magr, Method::ReplayFeatureNaive, Method::ReplayRaw] {
        let c = config(method, 3);
        let p = prepared(&c);
        let mut state = TrainState::new(&p.model, &c.train, p.dataset.width()).unwrap();
        let report =
            train_session(&mut state, &p.dataset, &p.plan.training(0), 1, &c.train).unwrap();
        assert!(!report.steps.is_empty());
        for s in &report.steps {
            assert_eq!(s.total, s.terms.data, "{method}");
            assert_eq!(
                (s.terms.memory, s.terms.projector, s.terms.graph),
                (0.0, 0.0, 0.0)
            );
        }
    }
}

#[test]
fn bank_grows_by_clipped_session_sizes() {
    let mut c = config(Method::Magr, 1);
    c.train.memory_per_session = 8;
    let p = prepared(&c);
    let out = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train).unwrap();
    let mut expected = 0;
    for (t, snap) in out.snapshots.iter().enumerate() {
        expected += p.plan.training(t).len().min(8);
        let bank = snap.bank.as_ref().unwrap();
        assert_eq!(bank.len(), expected);
        assert_eq!(bank.payload, Payload::Feature);
        assert_eq!(out.reports[t].bank_size, expected);
    }
}

#[test]
fn frozen_copy_equals_previous_encoder_after_full_session() {
    let c = config(Method::Magr, 2);
    let p = prepared(&c);
    let out = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train).unwrap();
    assert!(out.snapshots[0].bundle.frozen_encoder.is_none());
    for t in 1..out.snapshots.len() {
        let previous: &Encoder = &out.snapshots[t - 1].bundle.encoder;
        let snap = &out.snapshots[t].bundle;
        assert_eq!(snap.frozen_encoder.as_ref(), Some(previous));
        assert_ne!(
            &snap.encoder,
            previous,
            "session {} did not train the encoder",
            t + 1
        );
    }
}

#[test]
fn zero_projector_refresh_leaves_bank_unchanged() {
    let mut c = config(Method::Magr, 4);
    c.train.lambda_p = 0.0;
    let p = prepared(&c);
    let mut state = TrainState::new(&p.model, &c.train, p.dataset.width()).unwrap();
    train_session(&mut state, &p.dataset, &p.plan.training(0), 1, &c.train).unwrap();
    let mut bank = state.bank.clone().unwrap();
    let before = bank.features();
    let mut projector = state.bundle.projector.clone();
    projector.zero_output_layer();
    bank.refresh(&projector, true, 2).unwrap();
    assert_eq!(bank.features(), before);
}

#[test]
fn runs_are_deterministic() {
    for method in Method::ALL {
        let c = config(method, 9);
        let p = prepared(&c);
        let a = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train).unwrap();
        let b = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train).unwrap();
        assert_eq!(a.matrix, b.matrix, "{method}");
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.final_evals, b.final_evals);
    }
}

#[test]
fn checkpoint_reload_reproduces_every_row() {
    let c = config(Method::Magr, 5);
    let p = prepared(&c);
    let out = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train).unwrap();
    let mut rebuilt = EvalMatrix::new(p.plan.len());
    for (t, snap) in out.snapshots.iter().enumerate() {
        let ck = Checkpoint::capture(snap, &c, &p.model, p.scaler);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        let state = back.state().unwrap();
        assert_eq!(&state, snap);
        evaluate_row(
            &state.bundle,
            &p.dataset,
            &p.plan,
            &p.scaler,
            t + 1,
            t + 1,
            EvalSet::Full,
            &mut rebuilt,
        )
        .unwrap();
    }
    for i in 1..=p.plan.len() {
        for j in 1..=i {
            assert_eq!(rebuilt.get(i, j), out.matrix.get(i, j));
        }
        assert_eq!(rebuilt.pooled(i), out.matrix.pooled(i));
    }
}

#[test]
fn resuming_from_a_checkpoint_continues_the_same_run() {
    let c = config(Method::Magr, 6);
    let p = prepared(&c);
    let full = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train).unwrap();
    let ck = Checkpoint::from_json(
        &Checkpoint::capture(&full.snapshots[1], &c, &p.model, p.scaler).to_json(),
    )
    .unwrap();
    let mut state = ck.state().unwrap();
    for t in 3..=p.plan.len() {
        train_session(&mut state, &p.dataset, &p.plan.training(t - 1), t, &c.train).unwrap();
    }
    assert_eq!(&state, full.snapshots.last().unwrap());
}

#[test]
fn online_mode_runs_one_epoch_with_full_schema() {
    for method in [Method::Magr, Method::SequentialFt] {
        let mut c = config(method, 0);
        c.train.online = true;
        let p = prepared(&c);
        let out =
            trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train).unwrap();
        assert!(out.reports.iter().all(|r| r.epochs_run == 1));
        assert!(out.summary.rho_aft.is_some() && out.summary.rho_fwt.is_some());
        assert!((-1.0..=1.0).contains(&out.summary.rho_avg));
    }
}

#[test]
fn joint_training_fills_only_the_last_row() {
    let c = config(Method::Joint, 0);
    let p = prepared(&c);
    let out = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train).unwrap();
    let t = p.plan.len();
    assert_eq!(out.matrix.populated_rows(), vec![t]);
    assert_eq!(out.matrix.row(t).len(), t);
    assert_eq!(out.summary.rho_aft, None);
}

#[test]
fn csv_and_normalization_round_trips() {
    let c = config(Method::Magr, 0);
    let ds = c.dataset().unwrap();
    let back = data::parse_csv(&data::to_csv(&ds)).unwrap();
    assert_eq!(back.samples, ds.samples);
    let p = prepared(&c);
    for (raw, norm) in p.raw_plan.training(2).iter().zip(p.plan.training(2)) {
        assert!((p.scaler.denormalize(norm.label) - raw.label).abs() < 1e-12);
    }
}

#[test]
fn evaluation_metrics_ignore_the_scaler() {
    let c = config(Method::SequentialFt, 0);
    let p = prepared(&c);
    let out = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train).unwrap();
    let other = magr_core::ScoreScaler {
        min: -3.0,
        max: 250.0,
    };
    let bundle = &out.snapshots.last().unwrap().bundle;
    let mut m = EvalMatrix::new(p.plan.len());
    let t = p.plan.len();
    evaluate_row(
        bundle,
        &p.dataset,
        &p.plan,
        &other,
        t,
        t,
        EvalSet::Full,
        &mut m,
    )
    .unwrap();
    for j in 1..=t {
        assert!((m.get(t, j).unwrap() - out.matrix.get(t, j).unwrap()).abs() < 1e-12);
    }
}
