//! The comparison experiment: learn the mismatch on the plant, then roll four
//! controllers from the same initial state and record how each behaves.
//!
//! Artifacts are split by determinism. Trajectory CSVs and `report.txt`
//! depend only on (config, seed); `timing.txt` carries the wall-clock
//! measurements and is the only machine-dependent output.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use gpclf::clf::{clf_from_lqr, QuadraticClf};
use gpclf::conic::dump_program;
use gpclf::controllers::{gp_clf_socp, socp_program, ClfQp, ControllerConfig, GpClfQp};
use gpclf::dynamics::{
    fmt17, rollout, ControlAffineSystem, ControlDecision, Controller, StepStatus, Trajectory,
};
use gpclf::episodic::{run_algorithm, EpisodeConfig, EpisodeRecord, RoAEstimate};
use gpclf::gp::{train_hyperparams, GpModel, TrainOptions, TrainingSet};
use gpclf::kernels::AdpKernel;
use nalgebra::DVector;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::config::{Benchmark, ExperimentConfig};

/// A run aborts with exit code 3 when any controller spends more than this
/// fraction of its steps on the fallback input.
pub const FALLBACK_BUDGET: f64 = 0.05;

/// Slack below this is the relaxation's bookkeeping, not a real violation:
/// an active constraint always buys slack of order `rhs / (4p + 1)`.
const SLACK_TOL: f64 = 1e-2;

const CONTROLLER_NAMES: [&str; 4] =
    ["clf_qp_nominal", "clf_qp_plant", "gp_clf_qp", "gp_clf_socp"];

#[derive(Debug, Error)]
pub enum RunError {
    /// Problems traceable to the experiment definition (CLF design, episodic
    /// preconditions, model fitting); reported as config errors.
    #[error("{0}")]
    Setup(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(
        "checkpoint fingerprint {found} does not match this config and seed ({expected}); \
         pass --allow-checkpoint-mismatch to resume from it anyway"
    )]
    CheckpointMismatch { found: String, expected: String },
}

#[derive(Debug)]
pub struct ControllerReport {
    pub name: &'static str,
    pub final_v: f64,
    /// First time `V` reaches `0.05 V(x0)`, if it does within the horizon.
    pub time_to_threshold: Option<f64>,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub slack_activations: usize,
    pub fallback_fraction: f64,
    pub csv_path: PathBuf,
}

#[derive(Debug)]
pub struct ComparisonReport {
    pub benchmark: Benchmark,
    pub v0: f64,
    pub threshold: f64,
    pub levels: Vec<f64>,
    pub data_count: usize,
    pub records: Vec<EpisodeRecord>,
    pub controllers: Vec<ControllerReport>,
    pub report_path: PathBuf,
}

impl ComparisonReport {
    pub fn budget_exceeded(&self) -> bool {
        self.controllers.iter().any(|c| c.fallback_fraction > FALLBACK_BUDGET)
    }
}

#[derive(Debug, Default)]
pub struct RunOptions {
    pub load_checkpoint: Option<PathBuf>,
    pub allow_checkpoint_mismatch: bool,
    pub dump_failed_solves: bool,
}

/// GP-CLF-SOCP wrapper that optionally captures the conic program behind
/// every fallback step for offline replay.
struct SocpRunner<'a> {
    nominal: &'a dyn ControlAffineSystem,
    clf: &'a QuadraticClf,
    gp: &'a GpModel,
    cfg: &'a ControllerConfig,
    dump: Option<&'a RefCell<String>>,
}

impl Controller for SocpRunner<'_> {
    fn decide(&self, x: &DVector<f64>) -> ControlDecision {
        let decision = gp_clf_socp(self.nominal, self.clf, self.gp, self.cfg, x);
        if decision.status == StepStatus::Fallback {
            if let Some(log) = self.dump {
                let mut log = log.borrow_mut();
                let coords: Vec<String> = x.iter().map(|v| fmt17(*v)).collect();
                let _ = writeln!(log, "# fallback at x = [{}]", coords.join(", "));
                match socp_program(self.nominal, self.clf, self.gp, self.cfg, x) {
                    Ok(prog) => log.push_str(&dump_program(&prog)),
                    Err(e) => {
                        let _ = writeln!(log, "# program construction failed: {e}");
                    }
                }
                log.push('\n');
            }
        }
        decision
    }
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    fingerprint: &str,
    opts: &RunOptions,
) -> Result<ComparisonReport, RunError> {
    let total = Instant::now();
    fs::create_dir_all(&cfg.output_dir)?;
    let plant = cfg.plant_system();
    let nominal = cfg.nominal_system();
    let clf = clf_from_lqr(nominal.as_ref(), &cfg.q_matrix(), &cfg.r_matrix())
        .map_err(|e| RunError::Setup(format!("CLF design failed: {e}")))?;
    let ctrl = cfg.controller_config().map_err(RunError::Setup)?;
    let epi = &cfg.episodic;

    let training = Instant::now();
    let (model, roa, records) = obtain_model(cfg, fingerprint, opts, plant.as_ref(),
        nominal.as_ref(), &clf, &ctrl, epi)?;
    let training_wall = training.elapsed().as_secs_f64();

    // The baseline regresses the same labels on the state alone, folding the
    // input-dependent part of the mismatch into noise.
    let baseline = fit_state_only(&model, epi).map_err(RunError::Setup)?;

    let x0 = cfg.initial_error_state();
    let v0 = clf.value(&x0);
    let threshold = 0.05 * v0;

    let dump_log = RefCell::new(String::new());
    let socp = SocpRunner {
        nominal: nominal.as_ref(),
        clf: &clf,
        gp: &model,
        cfg: &ctrl,
        dump: opts.dump_failed_solves.then_some(&dump_log),
    };
    let qp_nominal = ClfQp { sys: nominal.as_ref(), clf: &clf, cfg: &ctrl };
    let qp_plant = ClfQp { sys: plant.as_ref(), clf: &clf, cfg: &ctrl };
    let qp_gp = GpClfQp { nominal: nominal.as_ref(), clf: &clf, gp: &baseline, cfg: &ctrl };
    let controllers: [(&str, &dyn Controller); 4] = [
        (CONTROLLER_NAMES[0], &qp_nominal),
        (CONTROLLER_NAMES[1], &qp_plant),
        (CONTROLLER_NAMES[2], &qp_gp),
        (CONTROLLER_NAMES[3], &socp),
    ];

    let mut reports = Vec::with_capacity(controllers.len());
    let mut trajectories = Vec::with_capacity(controllers.len());
    for (name, controller) in controllers {
        let traj = rollout(plant.as_ref(), controller, &clf, &x0, cfg.sim_horizon, cfg.sim_dt)
            .map_err(|e| RunError::Setup(format!("{name} rollout failed: {e}")))?;
        let csv_path = cfg.output_dir.join(format!("{name}.csv"));
        fs::write(&csv_path, traj.to_csv())?;
        reports.push(controller_report(name, &traj, threshold, csv_path));
        trajectories.push(traj);
    }

    if opts.dump_failed_solves {
        fs::write(cfg.output_dir.join("failed_solves.txt"), dump_log.borrow().as_bytes())?;
    }

    let report = ComparisonReport {
        benchmark: cfg.benchmark,
        v0,
        threshold,
        levels: roa.levels.clone(),
        data_count: model.len(),
        records,
        controllers: reports,
        report_path: cfg.output_dir.join("report.txt"),
    };
    fs::write(&report.report_path, render_report(&report, cfg))?;
    fs::write(
        cfg.output_dir.join("timing.txt"),
        render_timing(&report, training_wall, total.elapsed().as_secs_f64()),
    )?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn obtain_model(
    cfg: &ExperimentConfig,
    fingerprint: &str,
    opts: &RunOptions,
    plant: &dyn ControlAffineSystem,
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    ctrl: &ControllerConfig,
    epi: &EpisodeConfig,
) -> Result<(GpModel, RoAEstimate, Vec<EpisodeRecord>), RunError> {
    if let Some(path) = &opts.load_checkpoint {
        let ck = Checkpoint::load(path)?;
        if ck.config_sha256 != fingerprint && !opts.allow_checkpoint_mismatch {
            return Err(RunError::CheckpointMismatch {
                found: ck.config_sha256,
                expected: fingerprint.to_string(),
            });
        }
        let model = ck
            .rebuild_model()
            .map_err(|e| RunError::Setup(format!("checkpoint model rebuild failed: {e}")))?;
        return Ok((model, ck.roa, ck.records));
    }

    let ck_path = cfg.output_dir.join("checkpoint.json");
    let save_err: RefCell<Option<std::io::Error>> = RefCell::new(None);
    let result = run_algorithm(plant, nominal, clf, ctrl, epi, |state| {
        let ck = Checkpoint {
            config_sha256: fingerprint.to_string(),
            kernel: state.model.kernel().clone(),
            data: state.model.data().clone(),
            roa: roa_from_records(epi.c0, epi.delta, &state.records),
            records: state.records.clone(),
        };
        if let Err(e) = ck.save(&ck_path) {
            save_err.borrow_mut().get_or_insert(e);
        }
    })
    .map_err(|e| RunError::Setup(format!("episodic collection failed: {e}")))?;
    if let Some(e) = save_err.into_inner() {
        return Err(RunError::Io(e));
    }
    Ok((result.model, result.roa, result.records))
}

/// The level history as the running loop would report it: the seed level is
/// certified by assumption, later ones by their episode's fresh passes.
fn roa_from_records(c0: f64, delta: f64, records: &[EpisodeRecord]) -> RoAEstimate {
    let mut levels = vec![c0];
    let mut certified = vec![true];
    for rec in records {
        levels.push(rec.level);
        certified.push(!rec.stalled);
    }
    RoAEstimate { levels, certified, delta }
}

/// Refit on the same data with every mixing vector collapsed to `[1]`, the
/// state-only model the baseline controller expects.
fn fit_state_only(model: &GpModel, epi: &EpisodeConfig) -> Result<GpModel, String> {
    let data = model.data();
    let n = data.state_dim();
    let mut flat = TrainingSet::empty(n, 1, data.noise_std()).map_err(|e| e.to_string())?;
    let one = DVector::from_element(1, 1.0);
    for j in 0..data.len() {
        flat.push(&data.xs().column(j).into_owned(), &one, data.zs()[j])
            .map_err(|e| e.to_string())?;
    }
    let kernel = AdpKernel::homogeneous(1, epi.init_signal_variance, epi.init_lengthscale, n)
        .map_err(|e| e.to_string())?;
    // A single-output kernel has two hyperparameters; a short multi-start
    // search finds them without paying the full ADP training budget on a
    // data set that can run to several hundred points.
    let opts =
        TrainOptions { restarts: 3, max_iters: 60, seed: epi.seed, ..TrainOptions::default() };
    let (trained, _) = train_hyperparams(&kernel, &flat, &opts).map_err(|e| e.to_string())?;
    GpModel::fit(trained, flat).map_err(|e| e.to_string())
}

fn controller_report(
    name: &'static str,
    traj: &Trajectory,
    threshold: f64,
    csv_path: PathBuf,
) -> ControllerReport {
    ControllerReport {
        name,
        final_v: traj.final_v(),
        time_to_threshold: traj.time_to_level(threshold),
        mean_solve_ms: traj.mean_solve_time() * 1e3,
        max_solve_ms: traj.max_solve_time() * 1e3,
        slack_activations: traj.slack_activations(SLACK_TOL),
        fallback_fraction: traj.fallback_fraction(),
        csv_path,
    }
}

fn render_report(report: &ComparisonReport, cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "benchmark = {}", report.benchmark.as_str());
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "data_count = {}", report.data_count);
    let levels: Vec<String> = report.levels.iter().map(|l| fmt17(*l)).collect();
    let _ = writeln!(s, "levels = {}", levels.join(","));
    let _ = writeln!(s, "final_level = {}", levels.last().map_or("none", |l| l.as_str()));
    let _ = writeln!(s, "beta = {}", fmt17(cfg.beta));
    let _ = writeln!(s, "delta = {}", fmt17(cfg.delta));
    let _ = writeln!(s, "v0 = {}", fmt17(report.v0));
    let _ = writeln!(s, "threshold = {}", fmt17(report.threshold));
    for rec in &report.records {
        let _ = writeln!(s);
        let _ = writeln!(s, "[episode {}]", rec.index);
        let _ = writeln!(s, "level = {}", fmt17(rec.level));
        let _ = writeln!(s, "data_count = {}", rec.data_count);
        let _ = writeln!(s, "mean_probe_std = {}", fmt17(rec.mean_probe_std));
        let _ = writeln!(s, "max_probe_std = {}", fmt17(rec.max_probe_std));
        let _ = writeln!(s, "stalled = {}", rec.stalled);
    }
    for c in &report.controllers {
        let _ = writeln!(s);
        let _ = writeln!(s, "[controller {}]", c.name);
        let _ = writeln!(s, "final_v = {}", fmt17(c.final_v));
        match c.time_to_threshold {
            Some(t) => {
                let _ = writeln!(s, "time_to_threshold = {}", fmt17(t));
            }
            None => {
                let _ = writeln!(s, "time_to_threshold = none");
            }
        }
        let _ = writeln!(s, "slack_activations = {}", c.slack_activations);
        let _ = writeln!(s, "fallback_fraction = {}", fmt17(c.fallback_fraction));
        let file = c.csv_path.file_name().map(|f| f.to_string_lossy().into_owned());
        let _ = writeln!(s, "csv = {}", file.unwrap_or_default());
    }
    s
}

fn render_timing(report: &ComparisonReport, training_wall: f64, total_wall: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "training_wall_s = {training_wall:.3}");
    for rec in &report.records {
        let _ = writeln!(s, "episode_{}_wall_s = {:.3}", rec.index, rec.wall_time);
    }
    for c in &report.controllers {
        let _ = writeln!(s, "{}_mean_solve_ms = {:.3}", c.name, c.mean_solve_ms);
        let _ = writeln!(s, "{}_max_solve_ms = {:.3}", c.name, c.max_solve_ms);
    }
    let _ = writeln!(s, "total_wall_s = {total_wall:.3}");
    s
}

/// One-line stdout summary per controller.
pub fn summarize(report: &ComparisonReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{}: final level {:.4}, {} data points",
        report.benchmark.as_str(),
        report.levels.last().copied().unwrap_or(0.0),
        report.data_count
    );
    for c in &report.controllers {
        let reached = match c.time_to_threshold {
            Some(t) => format!("reaches threshold at t = {t:.2}"),
            None => "does not reach threshold".to_string(),
        };
        let _ = writeln!(s, "  {:>16}: final V = {:.3e}, {}", c.name, c.final_v, reached);
    }
    let _ = write!(s, "report: {}", report.report_path.display());
    s
}
