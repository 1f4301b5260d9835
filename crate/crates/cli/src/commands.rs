//! Subcommand implementations. Each writes into an output directory and
//! returns what it wrote so callers and tests can inspect it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use magr_core::checkpoint::Checkpoint;
use magr_core::data::{self, EvalSet};
use magr_core::experiment::{self, ExperimentConfig, SweepAxis};
use magr_core::metrics::EvalMatrix;
use magr_core::trainer::{self, Ablation, Method, Summary};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command, PlotKind};
use crate::artifacts::{self as art, ResultRow, RunManifest};
use crate::error::{io_error, CliError, Result};
use crate::pca;
use crate::svg::{Chart, Mark, Series};

pub const DATASET_CSV: &str = "dataset.csv";
pub const SPLIT_JSON: &str = "split.json";
pub const EVAL_JSON: &str = "eval.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_MEAN_CSV: &str = "ablation_mean.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const REPORT_MD: &str = "report.md";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))
}

fn manifest_name(command: &str) -> String {
    if command == "train" {
        art::MANIFEST_JSON.to_string()
    } else {
        format!("{command}-manifest.json")
    }
}

fn save_manifest(mut m: RunManifest, dir: &Path) -> Result<RunManifest> {
    let name = manifest_name(&m.command);
    m.artifacts.push(name.clone());
    art::write_json(&dir.join(name), &m)?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub session: usize,
    pub score_min: f64,
    pub score_max: f64,
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

/// Session membership by sample id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub shots: usize,
    pub score_range: (f64, f64),
    pub sessions: Vec<SessionEntry>,
}

fn split_manifest(cfg: &ExperimentConfig, dataset: &data::Dataset) -> Result<SplitManifest> {
    let plan = data::grade_split(dataset, cfg.data.sessions, cfg.data.shots, cfg.train.seed)?;
    let sessions = plan
        .sessions
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let all = s.all();
            let scores = dataset.scores(&all);
            let train: Vec<usize> = s.train.iter().map(|l| l.index).collect();
            SessionEntry {
                session: t + 1,
                score_min: scores.iter().copied().fold(f64::INFINITY, f64::min),
                score_max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                train: dataset.ids(&train),
                held_out: dataset.ids(&s.held_out),
            }
        })
        .collect();
    Ok(SplitManifest {
        seed: cfg.train.seed,
        shots: cfg.data.shots,
        score_range: dataset.score_range,
        sessions,
    })
}

pub fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    ensure_dir(out)?;
    let dataset = cfg.dataset()?;
    art::write_file(&out.join(DATASET_CSV), &data::to_csv(&dataset))?;
    art::write_json(&out.join(SPLIT_JSON), &split_manifest(cfg, &dataset)?)?;
    let mut m = RunManifest::new("gen", cfg, vec![cfg.train.seed]);
    m.artifacts = vec![DATASET_CSV.into(), SPLIT_JSON.into()];
    save_manifest(m, out)
}

pub fn split(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    ensure_dir(out)?;
    let dataset = cfg.dataset()?;
    art::write_json(&out.join(SPLIT_JSON), &split_manifest(cfg, &dataset)?)?;
    let mut m = RunManifest::new("split", cfg, vec![cfg.train.seed]);
    m.artifacts = vec![SPLIT_JSON.into()];
    save_manifest(m, out)
}

/// Runs all sessions and writes checkpoints, `results.csv`, `summary.json`,
/// predictions, features, the config snapshot and the manifest.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    ensure_dir(&out.join(art::CHECKPOINT_DIR))?;
    let (p, run) = experiment::run(cfg)?;
    let mut m = RunManifest::new("train", cfg, vec![cfg.train.seed]);

    art::write_file(&out.join(art::CONFIG_TOML), &cfg.to_toml())?;
    m.artifacts.push(art::CONFIG_TOML.into());
    for snap in &run.snapshots {
        let name = art::checkpoint_name(snap.session);
        Checkpoint::capture(snap, cfg, &p.model, p.scaler).save(&out.join(&name))?;
        m.artifacts.push(name);
    }
    art::write_csv(
        &out.join(art::RESULTS_CSV),
        &art::result_rows(&run.matrix, &run.summary),
    )?;
    art::write_json(&out.join(art::SUMMARY_JSON), &run.summary)?;
    art::write_csv(
        &out.join(art::PREDICTIONS_CSV),
        &art::prediction_rows(&p.dataset, &run.final_evals),
    )?;
    let last = run.snapshots.last().expect("at least one session");
    art::write_features(
        &out.join(art::FEATURES_CSV),
        &art::feature_rows(last, &p.dataset, &run.final_evals)?,
    )?;
    m.artifacts.extend(
        [
            art::RESULTS_CSV,
            art::SUMMARY_JSON,
            art::PREDICTIONS_CSV,
            art::FEATURES_CSV,
        ]
        .map(String::from),
    );
    m.session_seconds = run.reports.iter().map(|r| r.seconds).collect();
    save_manifest(m, out)
}

/// Metrics recomputed from checkpoints. `summary` is present when a whole
/// run was evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: Option<Summary>,
    pub rows: Vec<ResultRow>,
}

fn load_checkpoints(path: &Path) -> Result<Vec<Checkpoint>> {
    if path.is_file() {
        return Ok(vec![Checkpoint::load(path)?]);
    }
    let dir = path.join(art::CHECKPOINT_DIR);
    let entries = std::fs::read_dir(&dir).map_err(|_| CliError::MissingArtifact {
        path: dir.display().to_string(),
        what: "checkpoint directory",
    })?;
    let mut cks = Vec::new();
    for e in entries {
        let p = e.map_err(io_error(&dir))?.path();
        if p.extension().is_some_and(|x| x == "json") {
            cks.push(Checkpoint::load(&p)?);
        }
    }
    if cks.is_empty() {
        return Err(CliError::MissingArtifact {
            path: dir.display().to_string(),
            what: "checkpoints",
        });
    }
    cks.sort_by_key(|c| c.session);
    Ok(cks)
}

/// Evaluation-mode metrics from a run directory (all checkpoints, full
/// summary) or from one checkpoint file (its matrix row only).
pub fn eval(path: &Path, data_csv: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let whole_run = path.is_dir();
    let cks = load_checkpoints(path)?;
    let mut cfg = cks[0].config.clone();
    if let Some(csv) = data_csv {
        cfg.data.csv = Some(csv.to_path_buf());
    }
    let p = experiment::prepare(&cfg)?;
    let scaler = cks[0].scaler;
    let sessions = p.plan.len();
    let mode: EvalSet = cfg.train.eval_set;
    let mut matrix = EvalMatrix::new(sessions);
    for ck in &cks {
        if ck.session == 0 || ck.session > sessions {
            return Err(CliError::Argument {
                arg: "path",
                reason: format!("checkpoint session {} outside 1..={sessions}", ck.session),
            });
        }
        let bundle = ck.bundle()?;
        trainer::evaluate_row(
            &bundle,
            &p.dataset,
            &p.plan,
            &scaler,
            ck.session,
            ck.session,
            mode,
            &mut matrix,
        )?;
    }
    let report = if whole_run {
        trainer::fill_reference(
            &cks[0].model,
            &cfg.train,
            &p.dataset,
            &p.plan,
            &scaler,
            &mut matrix,
        )?;
        let summary = trainer::summarize(
            &matrix,
            cfg.train.method,
            cfg.train.seed,
            cfg.train.forgetting_rule,
        )?;
        EvalReport {
            rows: art::result_rows(&matrix, &summary),
            summary: Some(summary),
        }
    } else {
        let placeholder = Summary {
            method: cfg.train.method,
            seed: cfg.train.seed,
            rho_avg: f64::NAN,
            rho_aft: None,
            rho_fwt: None,
        };
        EvalReport {
            summary: None,
            rows: art::result_rows(&matrix, &placeholder),
        }
    };
    ensure_dir(out)?;
    art::write_json(&out.join(EVAL_JSON), &report)?;
    Ok(report)
}

pub const VARIANTS: [&str; 8] = [
    "full",
    "no_mp",
    "no_residual",
    "no_ii_gr",
    "no_j_gr",
    "no_iij_gr",
    "mse_gr",
    "random_sampling",
];

/// The base config switched to the given ablation variant of the full method.
pub fn variant_config(base: &ExperimentConfig, variant: &str) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    c.train.method = Method::Magr;
    let mut a = Ablation::default();
    match variant {
        "full" => {}
        "no_mp" => a.no_mp = true,
        "no_residual" => a.no_residual = true,
        "no_ii_gr" => a.no_ii_gr = true,
        "no_j_gr" => a.no_j_gr = true,
        "no_iij_gr" => {
            a.no_ii_gr = true;
            a.no_j_gr = true;
        }
        "mse_gr" => a.mse_gr = true,
        "random_sampling" => a.random_sampling = true,
        other => {
            return Err(CliError::Argument {
                arg: "variant",
                reason: format!("unknown ablation variant `{other}`"),
            })
        }
    }
    c.train.ablation = a;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub rho_avg: f64,
    pub rho_aft: Option<f64>,
    pub rho_fwt: Option<f64>,
    /// Percent change relative to the full variant with the same seed.
    pub rel_avg_pct: Option<f64>,
    pub rel_aft_pct: Option<f64>,
    pub rel_fwt_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMean {
    pub variant: String,
    pub seeds: usize,
    pub rho_avg: f64,
    pub rho_aft: Option<f64>,
    pub rho_fwt: Option<f64>,
    pub rel_avg_pct: Option<f64>,
}

fn relative(v: Option<f64>, base: Option<f64>) -> Option<f64> {
    match (v, base) {
        (Some(v), Some(b)) if b != 0.0 => Some((v - b) / b.abs() * 100.0),
        _ => None,
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    let v = v?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Every variant for every seed, one run each, in parallel.
pub fn ablation_summaries(
    base: &ExperimentConfig,
    variants: &[&str],
    seeds: &[u64],
) -> Result<Vec<(String, Summary)>> {
    let dataset = base.dataset()?;
    let cells: Vec<(&str, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(variant, seed)| {
            let c = variant_config(base, variant)?.with_seed(seed);
            let p = experiment::prepare_with(&c, dataset.clone())?;
            let run = trainer::run_continual(&p.dataset, &p.plan, &p.scaler, &p.model, &c.train)?;
            Ok((variant.to_string(), run.summary))
        })
        .collect()
}

pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    ensure_dir(out)?;
    let seeds = cfg.seed_list();
    let results = ablation_summaries(cfg, &VARIANTS, &seeds)?;
    let full: BTreeMap<u64, &Summary> = results
        .iter()
        .filter(|(v, _)| v == "full")
        .map(|(_, s)| (s.seed, s))
        .collect();
    let mut m = RunManifest::new("ablate", cfg, seeds.clone());
    let mut rows = Vec::with_capacity(results.len());
    for (variant, s) in &results {
        let base = full[&s.seed];
        rows.push(AblationRow {
            variant: variant.clone(),
            seed: s.seed,
            rho_avg: s.rho_avg,
            rho_aft: s.rho_aft,
            rho_fwt: s.rho_fwt,
            rel_avg_pct: relative(Some(s.rho_avg), Some(base.rho_avg)),
            rel_aft_pct: relative(s.rho_aft, base.rho_aft),
            rel_fwt_pct: relative(s.rho_fwt, base.rho_fwt),
        });
        let cell = format!("cells/{variant}/seed_{}", s.seed);
        ensure_dir(&out.join(&cell))?;
        let name = format!("{cell}/{}", art::SUMMARY_JSON);
        art::write_json(&out.join(&name), s)?;
        m.artifacts.push(name);
    }
    art::write_csv(&out.join(ABLATION_CSV), &rows)?;

    let full_mean = mean(
        rows.iter()
            .filter(|r| r.variant == "full")
            .map(|r| Some(r.rho_avg)),
    );
    let means: Vec<AblationMean> = VARIANTS
        .iter()
        .map(|&v| {
            let of = || rows.iter().filter(move |r| r.variant == v);
            let avg = mean(of().map(|r| Some(r.rho_avg))).unwrap_or(f64::NAN);
            AblationMean {
                variant: v.to_string(),
                seeds: of().count(),
                rho_avg: avg,
                rho_aft: mean(of().map(|r| r.rho_aft)),
                rho_fwt: mean(of().map(|r| r.rho_fwt)),
                rel_avg_pct: relative(Some(avg), full_mean),
            }
        })
        .collect();
    art::write_csv(&out.join(ABLATION_MEAN_CSV), &means)?;
    m.artifacts
        .extend([ABLATION_CSV, ABLATION_MEAN_CSV].map(String::from));
    save_manifest(m, out)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub rho_avg: f64,
    pub rho_aft: Option<f64>,
    pub rho_fwt: Option<f64>,
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Shots => "shots",
        SweepAxis::Noise => "noise",
        SweepAxis::Memory => "memory",
    }
}

pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out: &Path,
) -> Result<Vec<SweepRecord>> {
    ensure_dir(out)?;
    let seeds = cfg.seed_list();
    let rows: Vec<SweepRecord> = experiment::run_sweep(cfg, axis, values, &seeds)?
        .into_iter()
        .map(|r| SweepRecord {
            axis: axis_name(axis).into(),
            value: r.value,
            seed: r.seed,
            rho_avg: r.rho_avg,
            rho_aft: r.rho_aft,
            rho_fwt: r.rho_fwt,
        })
        .collect();
    art::write_csv(&out.join(SWEEP_CSV), &rows)?;
    let mut m = RunManifest::new("sweep", cfg, seeds);
    m.artifacts.push(SWEEP_CSV.into());
    save_manifest(m, out)?;
    Ok(rows)
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn run_label(dir: &Path) -> String {
    art::read_json::<Summary>(&dir.join(art::SUMMARY_JSON), "summary")
        .map(|s| format!("{} (seed {})", s.method, s.seed))
        .unwrap_or_else(|_| run_name(dir))
}

/// Predicted against true score, one colour per session, on equal axes.
pub fn scatter_chart(rows: &[art::PredictionRow], title: &str) -> Chart {
    let mut by_session: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        by_session
            .entry(r.session)
            .or_default()
            .push((r.truth, r.pred));
    }
    Chart {
        title: title.to_string(),
        x_label: "true score".into(),
        y_label: "predicted score".into(),
        series: by_session
            .into_iter()
            .map(|(s, points)| Series {
                label: format!("session {s}"),
                points,
                mark: Mark::Points,
            })
            .collect(),
        x_ticks: None,
        diagonal: true,
    }
}

/// Pooled correlation after each session, one line per run.
pub fn sessions_chart(runs: &[(String, Vec<ResultRow>)]) -> Chart {
    let mut max_session = 0;
    let series = runs
        .iter()
        .map(|(label, rows)| {
            let points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.metric == "rho_avg")
                .map(|r| {
                    max_session = max_session.max(r.session);
                    (r.session as f64, r.value)
                })
                .collect();
            Series {
                label: label.clone(),
                points,
                mark: Mark::Line,
            }
        })
        .collect();
    Chart {
        title: "Pooled rank correlation per session".into(),
        x_label: "session".into(),
        y_label: "pooled Spearman".into(),
        series,
        x_ticks: Some((1..=max_session).map(|s| s as f64).collect()),
        diagonal: false,
    }
}

/// Seed-averaged pooled correlation against the swept value.
pub fn sweep_chart(runs: &[(String, Vec<SweepRecord>)]) -> Chart {
    let mut ticks: Vec<f64> = Vec::new();
    let mut axis = String::new();
    let series = runs
        .iter()
        .map(|(label, rows)| {
            let mut grid: Vec<(f64, Vec<f64>)> = Vec::new();
            for r in rows {
                axis.clone_from(&r.axis);
                match grid.iter_mut().find(|(v, _)| *v == r.value) {
                    Some((_, vals)) => vals.push(r.rho_avg),
                    None => grid.push((r.value, vec![r.rho_avg])),
                }
            }
            grid.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (v, _) in &grid {
                if !ticks.contains(v) {
                    ticks.push(*v);
                }
            }
            Series {
                label: label.clone(),
                points: grid
                    .into_iter()
                    .map(|(v, vals)| (v, vals.iter().sum::<f64>() / vals.len() as f64))
                    .collect(),
                mark: Mark::Line,
            }
        })
        .collect();
    ticks.sort_by(f64::total_cmp);
    Chart {
        title: format!("Pooled rank correlation against {axis}"),
        x_label: axis,
        y_label: "mean pooled Spearman".into(),
        series,
        x_ticks: Some(ticks),
        diagonal: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaSidecar {
    pub points: usize,
    pub sessions: Vec<usize>,
    pub explained_variance: [f64; 2],
    /// Mean silhouette of the 2-D points grouped by session.
    pub silhouette: Option<f64>,
}

pub fn pca_chart(rows: &[art::FeatureRow], title: &str) -> Result<(Chart, PcaSidecar)> {
    let feats: Vec<Vec<f64>> = rows.iter().map(|r| r.feature.clone()).collect();
    let proj = pca::pca2d(&feats).ok_or_else(|| CliError::Argument {
        arg: "runs",
        reason: "need at least two feature rows of equal width".into(),
    })?;
    let labels: Vec<usize> = rows.iter().map(|r| r.session).collect();
    let mut by_session: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (r, p) in rows.iter().zip(&proj.points) {
        by_session.entry(r.session).or_default().push((p[0], p[1]));
    }
    let sidecar = PcaSidecar {
        points: rows.len(),
        sessions: by_session.keys().copied().collect(),
        explained_variance: proj.explained,
        silhouette: pca::silhouette(&proj.points, &labels),
    };
    let chart = Chart {
        title: title.to_string(),
        x_label: "component 1".into(),
        y_label: "component 2".into(),
        series: by_session
            .into_iter()
            .map(|(s, points)| Series {
                label: format!("session {s}"),
                points,
                mark: Mark::Points,
            })
            .collect(),
        x_ticks: None,
        diagonal: false,
    };
    Ok((chart, sidecar))
}

/// Renders the requested plot kind; returns the written files.
pub fn plot(kind: PlotKind, runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let mut written = Vec::new();
    let mut emit = |name: String, text: String| -> Result<()> {
        let path = out.join(name);
        art::write_file(&path, &text)?;
        written.push(path);
        Ok(())
    };
    match kind {
        PlotKind::Scatter => {
            for dir in runs {
                let rows: Vec<art::PredictionRow> =
                    art::read_csv(&dir.join(art::PREDICTIONS_CSV), "predictions")?;
                let chart = scatter_chart(&rows, &format!("Predicted vs true: {}", run_label(dir)));
                emit(format!("scatter-{}.svg", run_name(dir)), chart.render())?;
            }
        }
        PlotKind::Sessions => {
            let data = runs
                .iter()
                .map(|dir| {
                    Ok((
                        run_label(dir),
                        art::read_csv(&dir.join(art::RESULTS_CSV), "results")?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            emit("sessions.svg".into(), sessions_chart(&data).render())?;
        }
        PlotKind::Sweep => {
            let data = runs
                .iter()
                .map(|dir| {
                    Ok((
                        run_name(dir),
                        art::read_csv(&dir.join(SWEEP_CSV), "sweep table")?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            emit("sweep.svg".into(), sweep_chart(&data).render())?;
        }
        PlotKind::Pca2d => {
            for dir in runs {
                let rows = art::read_features(&dir.join(art::FEATURES_CSV))?;
                let (chart, sidecar) =
                    pca_chart(&rows, &format!("Feature PCA: {}", run_label(dir)))?;
                let name = run_name(dir);
                emit(format!("pca2d-{name}.svg"), chart.render())?;
                let mut json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
                json.push('\n');
                emit(format!("pca2d-{name}.json"), json)?;
            }
        }
    }
    Ok(written)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

/// Markdown tables of whatever each directory holds: a run summary, an
/// ablation grid or a sweep.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<String> {
    let mut md = String::new();
    let mut summaries = Vec::new();
    for dir in runs {
        let summary_path = dir.join(art::SUMMARY_JSON);
        let ablation_path = dir.join(ABLATION_MEAN_CSV);
        let sweep_path = dir.join(SWEEP_CSV);
        if summary_path.exists() {
            summaries.push((
                run_name(dir),
                art::read_json::<Summary>(&summary_path, "summary")?,
            ));
        } else if ablation_path.exists() {
            let rows: Vec<AblationMean> = art::read_csv(&ablation_path, "ablation means")?;
            md.push_str(&format!("## Ablation: {}\n\n", run_name(dir)));
            md.push_str("| variant | seeds | rho_avg | rho_aft | rho_fwt | change vs full (%) |\n|---|---|---|---|---|---|\n");
            for r in rows {
                md.push_str(&format!(
                    "| {} | {} | {:.4} | {} | {} | {} |\n",
                    r.variant,
                    r.seeds,
                    r.rho_avg,
                    cell(r.rho_aft),
                    cell(r.rho_fwt),
                    r.rel_avg_pct
                        .map_or_else(|| "n/a".into(), |x| format!("{x:+.2}"))
                ));
            }
            md.push('\n');
        } else if sweep_path.exists() {
            let rows: Vec<SweepRecord> = art::read_csv(&sweep_path, "sweep table")?;
            md.push_str(&format!("## Sweep: {}\n\n| axis | value | seed | rho_avg | rho_aft | rho_fwt |\n|---|---|---|---|---|---|\n", run_name(dir)));
            for r in rows {
                md.push_str(&format!(
                    "| {} | {} | {} | {:.4} | {} | {} |\n",
                    r.axis,
                    r.value,
                    r.seed,
                    r.rho_avg,
                    cell(r.rho_aft),
                    cell(r.rho_fwt)
                ));
            }
            md.push('\n');
        } else {
            return Err(CliError::MissingArtifact {
                path: dir.display().to_string(),
                what: "summary.json, ablation_mean.csv or sweep.csv",
            });
        }
    }
    if !summaries.is_empty() {
        let mut head = String::from("## Runs\n\n| run | method | seed | rho_avg | rho_aft | rho_fwt |\n|---|---|---|---|---|---|\n");
        for (name, s) in &summaries {
            head.push_str(&format!(
                "| {name} | {} | {} | {:.4} | {} | {} |\n",
                s.method,
                s.seed,
                s.rho_avg,
                cell(s.rho_aft),
                cell(s.rho_fwt)
            ));
        }
        head.push('\n');
        md.insert_str(0, &head);
    }
    ensure_dir(out)?;
    art::write_file(&out.join(REPORT_MD), &md)?;
    Ok(md)
}

/// Dispatches a parsed command line; returns the text for standard output.
pub fn run(cli: &Cli) -> Result<String> {
    let out = cli.out.as_path();
    let text = match &cli.command {
        Command::Gen => {
            let m = gen(&cli.resolve_config()?, out)?;
            format!("wrote {}\n", m.artifacts.join(", "))
        }
        Command::Split => {
            let m = split(&cli.resolve_config()?, out)?;
            format!("wrote {}\n", m.artifacts.join(", "))
        }
        Command::Train => {
            train(&cli.resolve_config()?, out)?;
            art::read_file(&out.join(art::SUMMARY_JSON), "summary")?
        }
        Command::Eval { path, data } => {
            let report = eval(path, data.as_deref(), out)?;
            let mut text = match &report.summary {
                Some(s) => serde_json::to_string_pretty(s),
                None => serde_json::to_string_pretty(&report.rows),
            }
            .expect("report serializes");
            text.push('\n');
            text
        }
        Command::Ablate => {
            ablate(&cli.resolve_config()?, out)?;
            art::read_file(&out.join(ABLATION_MEAN_CSV), "ablation means")?
        }
        Command::Sweep { axis, values } => {
            sweep(&cli.resolve_config()?, *axis, values, out)?;
            art::read_file(&out.join(SWEEP_CSV), "sweep table")?
        }
        Command::Plot { kind, runs } => plot(*kind, runs, out)?
            .iter()
            .map(|p| format!("{}\n", p.display()))
            .collect(),
        Command::Report { runs } => report(runs, out)?,
    };
    Ok(text)
}
