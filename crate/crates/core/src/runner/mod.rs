//! Experiment orchestration: seed batteries, ρ sweeps, duality and gradient
//! checks, and persistence of their artifacts.
//!
//! Every invocation writes into a fresh directory `<out_dir>/<mode>-<hash>-<n>`
//! where `hash` identifies the experiment config and `n` is the first unused counter, so no
//! existing file is ever appended to or overwritten.

mod checks;
mod config;
mod record;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checks::{
    duality_check, grad_check, DualityInstanceReport, DualityReport, GradCheckSummary, DUALITY_TOL,
    GRAD_TOL,
};
pub use config::{ExperimentSpec, Mode, SCHEMA_VERSION};
pub use record::{
    evaluate_model, ModelEvaluation, RunRecord, ScoreMetrics, SweepRow, SWEEP_HEADER,
};

use crate::dal::{train, DalError, Method, TrainData};
use crate::eval::EvalError;
use crate::model::{ModelError, ModelParams};
use crate::numerics::NumericsError;
use crate::synthdata::{
    estimate_discrepancy, labels_of, points_of, points_of_labeled, DiscrepancyEstimate,
    SceneConfig, SceneData, SynthError,
};
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config key {key}: {msg}")]
    Config { key: String, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("numerical check failed: {0}")]
    CheckFailed(String),
    #[error("{failed} of {total} runs failed")]
    RunsFailed { failed: usize, total: usize },
    #[error(transparent)]
    Dal(#[from] DalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl RunnerError {
    /// 1 for usage errors, 2 for failed numerical checks, 3 for run failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config { .. } | RunnerError::UnknownKey(_) => 1,
            RunnerError::CheckFailed(_) => 2,
            _ => 3,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), RunnerError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub(crate) fn read_file(path: &Path) -> Result<String, RunnerError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Creates `<out_dir>/<mode>-<hash12>-<n>` for the first `n` not yet taken.
pub fn fresh_run_dir(spec: &ExperimentSpec) -> Result<PathBuf, RunnerError> {
    fresh_dir(spec, spec.mode.name())
}

fn fresh_dir(spec: &ExperimentSpec, label: &str) -> Result<PathBuf, RunnerError> {
    fs::create_dir_all(&spec.out_dir).map_err(io_err(&spec.out_dir))?;
    let stem = format!("{label}-{}", &spec.hash()[..12]);
    for n in 0.. {
        let dir = spec.out_dir.join(format!("{stem}-{n}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => {
                return Err(RunnerError::Io {
                    path: dir,
                    source: e,
                })
            }
        }
    }
    unreachable!("unbounded counter")
}

/// Runs `jobs` on up to `workers` threads; results keep the input order.
pub fn run_pool<J, T, F>(jobs: Vec<J>, workers: usize, f: F) -> Vec<T>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let out = f(job);
                slots.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect()
}

/// Scene of one seed: the experiment's geometry with the seed substituted.
pub fn scene_for_seed(spec: &ExperimentSpec, seed: u64) -> SceneConfig {
    SceneConfig {
        seed,
        ..spec.scene.clone()
    }
}

fn discrepancy(
    spec: &ExperimentSpec,
    data: &SceneData,
    seed: u64,
) -> Result<DiscrepancyEstimate, RunnerError> {
    let k = spec
        .discrepancy_k
        .min(data.aux_test.len())
        .min(data.real_test.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(estimate_discrepancy(
        &data.aux_test,
        &data.real_test,
        k,
        spec.discrepancy_repeats,
        &mut rng,
    )?)
}

/// Trains one seed and writes `diagnostics.csv`, `checkpoint.json` and
/// `record.json` under `seed_dir`. `rel_dir` is the seed directory relative to
/// the run directory, as stored in the record.
pub fn train_seed(
    spec: &ExperimentSpec,
    method: Method,
    seed: u64,
    seed_dir: &Path,
    rel_dir: &Path,
) -> Result<RunRecord, RunnerError> {
    let start = Instant::now();
    let mut record = RunRecord::new(spec, method, seed, rel_dir);
    let outcome = (|| -> Result<(ModelParams, Option<f64>), RunnerError> {
        let data = SceneData::generate(&scene_for_seed(spec, seed))?;
        record.discrepancy = Some(discrepancy(spec, &data, seed)?);
        let train_data = TrainData {
            x_id: points_of_labeled(&data.id_train),
            y_id: labels_of(&data.id_train),
            x_ood: points_of(&data.aux_train),
        };
        let init = ModelParams::init(&spec.architecture(), seed)?;
        let cfg = crate::dal::DalConfig {
            seed,
            ..spec.dal.clone()
        };
        match train(&cfg, method, init, &train_data) {
            Ok(out) => {
                write_file(
                    &seed_dir.join(record::DIAGNOSTICS_FILE),
                    &out.diagnostics.to_csv(),
                )?;
                write_file(
                    &seed_dir.join(record::CHECKPOINT_FILE),
                    &out.params.to_json(),
                )?;
                let eval = evaluate_model(&out.params, &data, &spec.scores)?;
                record.set_evaluation(eval);
                Ok((
                    out.params,
                    (method == Method::Dal).then_some(out.dual.gamma),
                ))
            }
            Err(fail) => {
                write_file(
                    &seed_dir.join(record::DIAGNOSTICS_FILE),
                    &fail.diagnostics.to_csv(),
                )?;
                Err(RunnerError::Dal(fail.error))
            }
        }
    })();
    match outcome {
        Ok((_, gamma)) => record.final_gamma = gamma,
        Err(e) => record.failure = Some(e.to_string()),
    }
    record.wall_time_secs = start.elapsed().as_secs_f64();
    if record.failure.is_none() {
        if let Err(e) = record.validate() {
            record.failure = Some(e.to_string());
            record.clear_metrics();
        }
    }
    write_file(&seed_dir.join(record::RECORD_FILE), &record.to_json())?;
    Ok(record)
}

/// Result of a training or evaluation battery.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_dir: PathBuf,
    pub records: Vec<RunRecord>,
}

impl RunReport {
    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.failure.is_some()).count()
    }
}

fn method_of(mode: Mode) -> Method {
    match mode {
        Mode::TrainOe => Method::Oe,
        _ => Method::Dal,
    }
}

/// Per-seed training (`train-dal`, `train-oe`) or checkpoint evaluation
/// (`eval-only`). Seeds run concurrently; a failing seed is recorded and does
/// not stop the others. Aggregation re-reads the per-seed record files.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunReport, RunnerError> {
    spec.validate()?;
    if !matches!(spec.mode, Mode::TrainDal | Mode::TrainOe | Mode::EvalOnly) {
        return Err(RunnerError::Config {
            key: "mode".into(),
            msg: format!("{} is not a per-seed training mode", spec.mode.name()),
        });
    }
    let run_dir = fresh_run_dir(spec)?;
    write_file(&run_dir.join("config.txt"), &spec.to_config_string())?;
    let results = run_pool(spec.seeds.clone(), spec.workers, |&seed| {
        let rel = PathBuf::from(format!("seed-{seed}"));
        let dir = run_dir.join(&rel);
        match spec.mode {
            Mode::EvalOnly => eval_seed(spec, seed, &dir, &rel),
            mode => train_seed(spec, method_of(mode), seed, &dir, &rel),
        }
    });
    let mut records = Vec::with_capacity(results.len());
    for (res, seed) in results.into_iter().zip(&spec.seeds) {
        res?;
        let path = run_dir
            .join(format!("seed-{seed}"))
            .join(record::RECORD_FILE);
        records.push(
            RunRecord::from_json(&read_file(&path)?)
                .map_err(|msg| RunnerError::Format { path, msg })?,
        );
    }
    let all = serde_json::to_string_pretty(&records).expect("records serialize");
    write_file(&run_dir.join("records.json"), &all)?;
    Ok(RunReport { run_dir, records })
}

fn eval_seed(
    spec: &ExperimentSpec,
    seed: u64,
    seed_dir: &Path,
    rel_dir: &Path,
) -> Result<RunRecord, RunnerError> {
    let start = Instant::now();
    let mut record = RunRecord::new(spec, Method::Dal, seed, rel_dir);
    record.method = "checkpoint".into();
    let outcome = (|| -> Result<(), RunnerError> {
        let path = spec.checkpoint.as_ref().expect("validated");
        let params = ModelParams::from_json(&read_file(path)?)?;
        let data = SceneData::generate(&scene_for_seed(spec, seed))?;
        record.discrepancy = Some(discrepancy(spec, &data, seed)?);
        record.set_evaluation(evaluate_model(&params, &data, &spec.scores)?);
        record.validate()
    })();
    if let Err(e) = outcome {
        record.failure = Some(e.to_string());
        record.clear_metrics();
    }
    record.wall_time_secs = start.elapsed().as_secs_f64();
    write_file(&seed_dir.join(record::RECORD_FILE), &record.to_json())?;
    Ok(record)
}

/// Result of a ρ sweep.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub run_dir: PathBuf,
    pub rows: Vec<SweepRow>,
    pub records: Vec<RunRecord>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        record::sweep_csv(&self.rows)
    }
}

/// Trains DAL for every `(ρ, seed)` pair and writes `curve.csv` with one row
/// per pair, grid-major. Metrics use the first configured scoring function.
pub fn sweep_rho(spec: &ExperimentSpec) -> Result<SweepReport, RunnerError> {
    spec.validate()?;
    if spec.mode != Mode::SweepRho {
        return Err(RunnerError::Config {
            key: "mode".into(),
            msg: "sweep_rho needs mode sweep-rho".into(),
        });
    }
    let run_dir = fresh_run_dir(spec)?;
    write_file(&run_dir.join("config.txt"), &spec.to_config_string())?;
    let jobs: Vec<(usize, f64, u64)> = spec
        .rho_grid
        .iter()
        .enumerate()
        .flat_map(|(i, &rho)| spec.seeds.iter().map(move |&s| (i, rho, s)))
        .collect();
    let results = run_pool(jobs.clone(), spec.workers, |&(i, rho, seed)| {
        let mut sub = spec.clone();
        sub.dal.rho = rho;
        let rel = PathBuf::from(format!("rho-{i}/seed-{seed}"));
        train_seed(&sub, Method::Dal, seed, &run_dir.join(&rel), &rel)
    });
    let mut rows = Vec::with_capacity(jobs.len());
    let mut records = Vec::with_capacity(jobs.len());
    for (res, &(i, rho, seed)) in results.into_iter().zip(&jobs) {
        res?;
        let path = run_dir
            .join(format!("rho-{i}/seed-{seed}"))
            .join(record::RECORD_FILE);
        let rec = RunRecord::from_json(&read_file(&path)?)
            .map_err(|msg| RunnerError::Format { path, msg })?;
        rows.push(SweepRow::from_record(rho, &rec, spec.scores[0]));
        records.push(rec);
    }
    write_file(&run_dir.join("curve.csv"), &record::sweep_csv(&rows))?;
    Ok(SweepReport {
        run_dir,
        rows,
        records,
    })
}

/// Writes the scene of every configured seed as `scene-<seed>.csv`.
pub fn generate_data(spec: &ExperimentSpec) -> Result<Vec<PathBuf>, RunnerError> {
    spec.scene.validate()?;
    if spec.seeds.is_empty() {
        return Err(RunnerError::Config {
            key: "seeds".into(),
            msg: "at least one seed required".into(),
        });
    }
    let dir = fresh_dir(spec, "gen-data")?;
    spec.seeds
        .iter()
        .map(|&seed| {
            let data = SceneData::generate(&scene_for_seed(spec, seed))?;
            let path = dir.join(format!("scene-{seed}.csv"));
            write_file(&path, &data.to_csv())?;
            Ok(path)
        })
        .collect()
}
