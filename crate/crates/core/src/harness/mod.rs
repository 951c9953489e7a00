//! Experiment orchestration: configuration, Monte-Carlo runs, metrics files and reports.
//!
//! An experiment directory holds `config.toml` (the normalized configuration) and one
//! subdirectory per mode (`pg/`, `lapg/`) with `run_NNN.csv` files and `aggregate.csv`.

mod config;
pub mod metrics;
mod report;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lapg::{Controller, Engine, Learner, LearnerConfig, Mode, StepRecord, VarianceMode};
use crate::seed::{derive_master, seed_stream, CONTROLLER};
use crate::transport::{InProcess, Responder, SocketTransport, Transport};

pub use config::{
    preset, AlgoConfig, AnalysisConfig, EnvConfig, ExperimentConfig, Instance, ParallelConfig,
    PolicyConfig, RandomTabular, SeedConfig, TabularConfig, TransportKind, TriggerBlock,
    HETERO_SCALE_SEED, PRESETS, PRESET_PREFIX,
};
use metrics::{aggregate, aggregate_csv, run_csv, MetricsRow};
pub use report::{analyze, compare, oracle_check, AnalysisReport, Comparison, LearnerOracle, OracleReport};

/// Environment variable overriding the root of relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "LAPG_OUTPUT_ROOT";

pub fn mode_dir_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Pg => "pg",
        Mode::Lapg => "lapg",
    }
}

/// Output directory of an experiment: `output`, or `runs/<name>`, under `LAPG_OUTPUT_ROOT`
/// when that is set and the path is relative.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    let dir = cfg
        .output
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

/// A Monte-Carlo run that stopped early.
#[derive(Debug)]
pub struct RunFailure {
    pub mode: Mode,
    pub run_id: usize,
    pub error: Error,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    /// Per mode, the metrics of every run in run order.
    pub runs: Vec<(Mode, Vec<Vec<MetricsRow>>)>,
    pub failures: Vec<RunFailure>,
    pub warnings: Vec<String>,
}

/// Learners for one run of `mode`.
pub fn build_learners(
    cfg: &ExperimentConfig,
    instance: &Instance,
    mode: Mode,
    master: u64,
) -> Result<Vec<Box<dyn Responder>>> {
    let trigger = cfg.trigger();
    let m = instance.learners();
    let sigma2 = match (mode, trigger.variance_mode) {
        (Mode::Lapg, VarianceMode::AnalyticBound) => {
            let constants = instance.constants(cfg.algo.gamma).ok_or_else(|| {
                Error::config("algo.trigger.variance_mode: the analytic bound needs certified score bounds")
            })??;
            trigger.analytic_sigma2(&constants, cfg.algo.batch_size)?
        }
        _ => vec![0.0; m],
    };
    instance
        .tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let lc = LearnerConfig {
                mode,
                trigger: trigger.clone(),
                batch: cfg.batch(),
                source: cfg.algo.source,
                master,
                analytic_sigma2: sigma2[i],
            };
            Ok(Box::new(Learner::new(i, m, task.clone(), instance.bundle.clone(), lc)?) as Box<dyn Responder>)
        })
        .collect()
}

/// Master seed of the rollout streams of run `run_id` in `mode`.
pub fn rollout_master(cfg: &ExperimentConfig, mode: Mode, run_id: usize) -> u64 {
    let run_master = derive_master(cfg.seeds.master, run_id as u64);
    match (cfg.algo.paired, mode) {
        (false, Mode::Lapg) => derive_master(run_master, 1),
        _ => run_master,
    }
}

/// Executes one Monte-Carlo run; records before a failure are kept.
pub fn execute_run(cfg: &ExperimentConfig, instance: &Instance, mode: Mode, run_id: usize) -> (Vec<StepRecord>, Option<Error>) {
    let run_master = derive_master(cfg.seeds.master, run_id as u64);
    let theta0 = instance
        .bundle
        .init_params(&mut seed_stream(run_master, CONTROLLER, 0, 0));
    let depth = match mode {
        Mode::Pg => 0,
        Mode::Lapg => cfg.algo.trigger.xi.len(),
    };
    let xi = match mode {
        Mode::Pg => Vec::new(),
        Mode::Lapg => cfg.algo.trigger.xi.clone(),
    };
    let go = || -> Result<(Vec<StepRecord>, Option<Error>)> {
        let learners = build_learners(cfg, instance, mode, rollout_master(cfg, mode, run_id))?;
        let controller = Controller::new(theta0, instance.learners(), cfg.algo.alpha, cfg.algo.momentum, depth)?;
        Ok(match cfg.transport {
            TransportKind::InProcess => drive(Engine::new(controller, InProcess::new(learners), mode, xi)?, cfg),
            TransportKind::Socket => {
                let mut engine = Engine::new(controller, SocketTransport::spawn_local(learners)?, mode, xi)?;
                let out = engine.run(cfg.algo.iterations);
                let closed = engine.into_transport().close();
                (out.records, out.error.or(closed.err()))
            }
        })
    };
    go().unwrap_or_else(|e| (Vec::new(), Some(e)))
}

fn drive<T: Transport>(mut engine: Engine<T>, cfg: &ExperimentConfig) -> (Vec<StepRecord>, Option<Error>) {
    let out = engine.run(cfg.algo.iterations);
    (out.records, out.error)
}

/// Runs every configured mode and Monte-Carlo run, concurrently, and writes the metrics
/// under `dir`. Runs that fail keep their partial CSVs and are listed in the outcome.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let instance = cfg.instantiate()?;
    let warnings = cfg.warnings(&instance);
    // surface configuration problems once, before spawning runs
    for &mode in &cfg.algo.modes {
        build_learners(cfg, &instance, mode, 0)?;
    }
    let m = instance.learners();
    let jobs: Vec<(Mode, usize)> = cfg
        .algo
        .modes
        .iter()
        .flat_map(|&mode| (0..cfg.seeds.runs).map(move |r| (mode, r)))
        .collect();
    let one = |&(mode, run): &(Mode, usize)| execute_run(cfg, &instance, mode, run);
    let results: Vec<(Vec<StepRecord>, Option<Error>)> = match cfg.transport {
        TransportKind::InProcess => jobs.par_iter().map(one).collect(),
        // socket learners use the rayon pool for rollouts, so the controller must not block it
        TransportKind::Socket => jobs.iter().map(one).collect(),
    };

    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut results = results.into_iter();
    for &mode in &cfg.algo.modes {
        let mode_dir = dir.join(mode_dir_name(mode));
        std::fs::create_dir_all(&mode_dir)?;
        let mut rows_per_run = Vec::with_capacity(cfg.seeds.runs);
        for run_id in 0..cfg.seeds.runs {
            let (records, error) = results.next().expect("one result per job");
            let rows: Vec<MetricsRow> = records.iter().map(|r| MetricsRow::from_record(run_id, m, r)).collect();
            std::fs::write(mode_dir.join(format!("run_{run_id:03}.csv")), run_csv(&rows))?;
            if let Some(error) = error {
                failures.push(RunFailure { mode, run_id, error });
            }
            rows_per_run.push(rows);
        }
        std::fs::write(mode_dir.join("aggregate.csv"), aggregate_csv(&aggregate(&rows_per_run)))?;
        runs.push((mode, rows_per_run));
    }
    Ok(ExperimentOutcome {
        dir: dir.to_path_buf(),
        runs,
        failures,
        warnings,
    })
}
