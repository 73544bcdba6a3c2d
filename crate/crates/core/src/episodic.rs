//! Episodic data collection: an initial model from the certified seed
//! region, then episodes of max-variance exploration, certificate-driven
//! level expansion, and a growing region-of-attraction estimate.
//!
//! Each episode (1) samples candidate pairs from the annulus between the
//! current level and its expansion and keeps the `N_e` of largest posterior
//! deviation, (2) rolls the plant out from those pairs under the current
//! GP-CLF-SOCP, checking the stabilizability certificate at every visited
//! state, (3) raises the certified level to the largest sampled value that
//! passed, and (4) refits the model on the enlarged data set.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clf::{verify_exponential_condition, ClfError, QuadraticClf};
use crate::conic::{
    check_feasibility, ConicError, ConicProgram, Feasibility, SocConstraint, SolverOptions,
};
use crate::controllers::{gp_clf_socp, ClfQp, ControllerConfig};
use crate::dynamics::{
    make_measurement, rollout, step_rk4, ControlAffineSystem, DynamicsError, Measurement,
    Trajectory,
};
use crate::gp::{train_hyperparams, GpError, GpModel, TrainOptions, TrainingSet};
use crate::kernels::{AdpKernel, KernelError};

/// Margin that turns the open stabilizability condition into a checkable
/// closed one: the certificate requires the bound to reach `-EPS_STRICT`.
pub const EPS_STRICT: f64 = 1e-6;

/// Sublevel values this close to zero are treated as the origin, which the
/// pointwise certificate excludes by construction.
const ORIGIN_LEVEL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EpisodicError {
    #[error("config invariant violated: {0}")]
    BadConfig(&'static str),
    #[error(
        "initial level is not certified on the nominal model (worst margin {worst:.3e}); \
         shrink c0 or enlarge the input box"
    )]
    InitialLevelNotCertified { worst: f64 },
    #[error("collected data excites mixing rank {rank} < {need}; more or longer rollouts needed")]
    ExcitationDeficient { rank: usize, need: usize },
    #[error(transparent)]
    Clf(#[from] ClfError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

/// Parameters of the collection loop. All quantities the source material
/// leaves unreported are exposed here rather than hard-coded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Initial certified level `c0`.
    pub c0: f64,
    /// Per-episode expansion increment (the same for every episode).
    pub delta_c: f64,
    /// Exploration pairs kept per episode.
    pub n_exploration: usize,
    /// Steps per exploration rollout.
    pub rollout_steps: usize,
    pub rollout_dt: f64,
    /// Annulus candidates scored per episode before the top-`N_e` cut.
    pub candidate_pool_size: usize,
    pub total_episodes: usize,
    /// Rollouts used to build the initial data set from the seed region.
    pub initial_rollouts: usize,
    /// Assumed observation noise of the finite-difference labels.
    pub noise_std: f64,
    pub init_signal_variance: f64,
    pub init_lengthscale: f64,
    /// Confidence parameter reported with the estimate.
    pub delta: f64,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            c0: 0.5,
            delta_c: 0.5,
            n_exploration: 4,
            rollout_steps: 20,
            rollout_dt: 0.02,
            candidate_pool_size: 80,
            total_episodes: 7,
            initial_rollouts: 6,
            noise_std: 0.01,
            init_signal_variance: 1.0,
            init_lengthscale: 1.5,
            delta: 0.05,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EpisodicError> {
        let bad = |msg| Err(EpisodicError::BadConfig(msg));
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return bad("c0 must be positive");
        }
        if !(self.delta_c > 0.0 && self.delta_c.is_finite()) {
            return bad("delta_c must be positive");
        }
        if self.n_exploration == 0 {
            return bad("n_exploration must be at least 1");
        }
        if self.rollout_steps == 0 {
            return bad("rollout_steps must be at least 1");
        }
        if !(self.rollout_dt > 0.0 && self.rollout_dt.is_finite()) {
            return bad("rollout_dt must be positive");
        }
        if self.candidate_pool_size < self.n_exploration {
            return bad("candidate_pool_size must cover n_exploration");
        }
        if self.initial_rollouts == 0 {
            return bad("initial_rollouts must be at least 1");
        }
        if !(self.noise_std > 0.0) {
            return bad("noise_std must be positive");
        }
        if !(self.init_signal_variance > 0.0 && self.init_lengthscale > 0.0) {
            return bad("initial hyperparameters must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        Ok(())
    }
}

/// One line of the episode log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    /// Certified level after the episode.
    pub level: f64,
    pub data_count: usize,
    pub mean_probe_std: f64,
    pub max_probe_std: f64,
    /// No sampled state passed the certificate; the level was kept.
    pub stalled: bool,
    pub wall_time: f64,
}

/// Growing region-of-attraction estimate: the level history and the
/// confidence parameter the per-level claims are made at.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoAEstimate {
    pub levels: Vec<f64>,
    /// Whether the level's episode produced fresh certificate passes (the
    /// seed level and carried-over levels inherit their earlier status).
    pub certified: Vec<bool>,
    pub delta: f64,
}

impl RoAEstimate {
    pub fn final_level(&self) -> f64 {
        *self.levels.last().expect("estimate has at least the seed level")
    }
}

/// Mutable loop state threaded through episodes.
#[derive(Debug, Clone)]
pub struct AlgorithmState {
    pub model: GpModel,
    /// Current certified level `c_i`.
    pub level: f64,
    pub records: Vec<EpisodeRecord>,
    /// Fixed probe pairs for the deviation-trend statistic.
    pub probes: Vec<(DVector<f64>, DVector<f64>)>,
    rng: ChaCha8Rng,
}

/// Everything the loop produces.
#[derive(Debug)]
pub struct AlgorithmResult {
    pub model: GpModel,
    pub roa: RoAEstimate,
    pub records: Vec<EpisodeRecord>,
}

fn uniform_box(lo: &DVector<f64>, hi: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(lo.len(), |i, _| {
        if hi[i] > lo[i] {
            rng.random_range(lo[i]..=hi[i])
        } else {
            lo[i]
        }
    })
}

/// Append measurements from consecutive trajectory pairs whose midpoint
/// state lies inside the level set. Returns how many were kept.
fn push_trajectory(
    data: &mut TrainingSet,
    clf: &QuadraticClf,
    nominal: &dyn ControlAffineSystem,
    traj: &Trajectory,
    level: f64,
) -> Result<usize, EpisodicError> {
    let mut kept = 0;
    for pair in traj.steps.windows(2) {
        let meas = make_measurement(clf, nominal, &pair[0].x, &pair[1].x, &pair[0].u, traj.dt);
        if clf.value(&meas.x) <= level {
            data.push(&meas.x, &meas.mixing(), meas.z)?;
            kept += 1;
        }
    }
    Ok(kept)
}

/// Build the initial data set: rollouts of the plant under the nominal
/// model-based CLF-QP from starts sampled uniformly in the seed region,
/// keeping midpoints inside it. Extra batches are drawn if the mixing
/// directions do not yet span all of `[1, u^T]`, which would leave the
/// compound regression underdetermined.
pub fn collect_initial(
    plant: &dyn ControlAffineSystem,
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    ctrl: &ControllerConfig,
    cfg: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSet, EpisodicError> {
    cfg.validate()?;
    let m = nominal.input_dim();
    let mut data = TrainingSet::empty(nominal.state_dim(), m + 1, cfg.noise_std)?;
    let region = clf.sublevel(cfg.c0);
    let controller = ClfQp { sys: nominal, clf, cfg: ctrl };
    let horizon = cfg.rollout_steps as f64 * cfg.rollout_dt;
    for _batch in 0..5 {
        for _ in 0..cfg.initial_rollouts {
            let x0 = region.sample(rng)?;
            let traj = rollout(plant, &controller, clf, &x0, horizon, cfg.rollout_dt)?;
            push_trajectory(&mut data, clf, nominal, &traj, cfg.c0)?;
        }
        if data.excitation_rank() == m + 1 {
            return Ok(data);
        }
    }
    Err(EpisodicError::ExcitationDeficient { rank: data.excitation_rank(), need: m + 1 })
}

/// Candidate pairs from the annulus `{c_prev < V <= c_prev + delta_c} x U`
/// with the largest posterior deviation, most uncertain first. Ties and
/// ordering are broken by draw index, so the result is deterministic for a
/// given generator state.
pub fn select_exploration_points(
    gp: &GpModel,
    clf: &QuadraticClf,
    c_prev: f64,
    delta_c: f64,
    input_lo: &DVector<f64>,
    input_hi: &DVector<f64>,
    n_e: usize,
    pool: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>, EpisodicError> {
    let mut scored =
        score_annulus_pool(gp, clf, c_prev, delta_c, input_lo, input_hi, pool, rng)?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(n_e);
    Ok(scored.into_iter().map(|(_, _, x, u)| (x, u)).collect())
}

/// Uniform annulus x box candidates scored by posterior variance, tagged
/// with their draw index: `(variance, index, x, u)`.
fn score_annulus_pool(
    gp: &GpModel,
    clf: &QuadraticClf,
    c_prev: f64,
    delta_c: f64,
    input_lo: &DVector<f64>,
    input_hi: &DVector<f64>,
    pool: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(f64, usize, DVector<f64>, DVector<f64>)>, EpisodicError> {
    let shell = clf.sublevel(c_prev + delta_c);
    let mut scored = Vec::with_capacity(pool);
    for idx in 0..pool {
        let x = shell.sample_shell(c_prev, rng)?;
        let u = uniform_box(input_lo, input_hi, rng);
        let (_, var) = gp.predict(&x, &u)?;
        scored.push((var, idx, x, u));
    }
    Ok(scored)
}

/// Pointwise stabilizability certificate at `x`: feasibility of
///
/// ```text
/// exists u in U:  LfV + LgV u + mu*(x, u) + beta sigma*(x, u) <= -EPS_STRICT
/// ```
///
/// solved as a second-order cone feasibility problem. The origin is excluded
/// from the pointwise condition and reports feasible by convention. An
/// undecided solver outcome is treated as infeasible, never the reverse.
pub fn check_certificate(
    gp: &GpModel,
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    beta: f64,
    input_lo: &DVector<f64>,
    input_hi: &DVector<f64>,
    opts: &SolverOptions,
    x: &DVector<f64>,
) -> Result<bool, EpisodicError> {
    if clf.value(x) <= ORIGIN_LEVEL {
        return Ok(true);
    }
    let m = nominal.input_dim();
    let (lf, lg) = clf.lie_derivatives(nominal, x);
    let post = gp.posterior_adp(x)?;
    let factors = gp.socp_factors(&post)?;

    let mut prog = ConicProgram::new(DVector::zeros(m));
    let rows = factors.constant.len();
    let a = beta * &factors.input_cols;
    debug_assert_eq!(a.nrows(), rows);
    let b = beta * &factors.constant;
    let mut g = DVector::zeros(m);
    for i in 0..m {
        g[i] = -(lg[i] + post.b[i + 1]);
    }
    let h = -(lf + post.b[0] + EPS_STRICT);
    prog.push_soc(SocConstraint { a, b, g, h })?;
    for i in 0..m {
        let mut up = DVector::zeros(m);
        up[i] = 1.0;
        prog.push_linear(up, input_hi[i])?;
        let mut dn = DVector::zeros(m);
        dn[i] = -1.0;
        prog.push_linear(dn, -input_lo[i])?;
    }
    Ok(matches!(check_feasibility(&prog, opts)?, Feasibility::Feasible(_)))
}

struct ExplorationRun {
    idx: usize,
    raw: Vec<Measurement>,
    /// `(V, certificate verdict)` at visited states inside the annulus.
    checks: Vec<(f64, bool)>,
}

/// One exploration rollout: the selected input is applied on the first step
/// (the pair is where the model is uncertain), then the current GP-CLF-SOCP
/// takes over on the plant.
#[allow(clippy::too_many_arguments)]
fn explore_one(
    idx: usize,
    seed: &(DVector<f64>, DVector<f64>),
    plant: &dyn ControlAffineSystem,
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    gp: &GpModel,
    ctrl: &ControllerConfig,
    cfg: &EpisodeConfig,
    c_prev: f64,
) -> Result<ExplorationRun, EpisodicError> {
    let c_hi = c_prev + cfg.delta_c;
    let mut raw = Vec::with_capacity(cfg.rollout_steps);
    let mut checks = Vec::new();
    let mut x = seed.0.clone();
    let certify = |x: &DVector<f64>, checks: &mut Vec<(f64, bool)>| {
        let v = clf.value(x);
        if v > c_prev && v <= c_hi {
            let ok = check_certificate(
                gp,
                nominal,
                clf,
                ctrl.beta,
                &ctrl.input_lo,
                &ctrl.input_hi,
                &ctrl.solver,
                x,
            )?;
            checks.push((v, ok));
        }
        Ok::<(), EpisodicError>(())
    };
    certify(&x, &mut checks)?;
    for k in 0..cfg.rollout_steps {
        let u = if k == 0 {
            seed.1.clone()
        } else {
            gp_clf_socp(nominal, clf, gp, ctrl, &x).u
        };
        let Ok(next) = step_rk4(plant, &x, &u, cfg.rollout_dt) else {
            break;
        };
        raw.push(make_measurement(clf, nominal, &x, &next, &u, cfg.rollout_dt));
        certify(&next, &mut checks)?;
        x = next;
    }
    Ok(ExplorationRun { idx, raw, checks })
}

/// Run one episode in place: explore, certify, expand the level, retain data
/// inside the new level, and refit the model with a warm-started
/// hyperparameter search.
pub fn run_episode(
    plant: &dyn ControlAffineSystem,
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    ctrl: &ControllerConfig,
    cfg: &EpisodeConfig,
    state: &mut AlgorithmState,
) -> Result<(), EpisodicError> {
    let start = Instant::now();
    cfg.validate()?;
    let c_prev = state.level;
    let mut scored = score_annulus_pool(
        &state.model,
        clf,
        c_prev,
        cfg.delta_c,
        &ctrl.input_lo,
        &ctrl.input_hi,
        cfg.candidate_pool_size,
        &mut state.rng,
    )?;
    // The whole scored pool gets a certificate check: rollouts only descend
    // from their seeds, so the pool is what covers the annulus densely
    // enough for the level to track the sampled maximum.
    let pool_checks = scored
        .par_iter()
        .map(|(_, _, x, _)| {
            let v = clf.value(x);
            check_certificate(
                &state.model,
                nominal,
                clf,
                ctrl.beta,
                &ctrl.input_lo,
                &ctrl.input_hi,
                &ctrl.solver,
                x,
            )
            .map(|ok| (v, ok))
        })
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(cfg.n_exploration);
    let seeds: Vec<(DVector<f64>, DVector<f64>)> =
        scored.into_iter().map(|(_, _, x, u)| (x, u)).collect();

    let mut runs = seeds
        .par_iter()
        .enumerate()
        .map(|(idx, seed)| {
            explore_one(idx, seed, plant, nominal, clf, &state.model, ctrl, cfg, c_prev)
        })
        .collect::<Result<Vec<_>, _>>()?;
    runs.sort_by_key(|r| r.idx);

    // Expand to the largest certified sampled level, capped strictly below
    // the smallest sampled level that failed, floor-quantized onto a 64-step
    // grid so the claim never exceeds a sampled value.
    let all_checks =
        || pool_checks.iter().chain(runs.iter().flat_map(|r| r.checks.iter())).copied();
    let mut cap = f64::INFINITY;
    for (v, ok) in all_checks() {
        if !ok {
            cap = cap.min(v);
        }
    }
    let mut best = c_prev;
    let mut any_pass = false;
    for (v, ok) in all_checks() {
        if ok && v < cap {
            best = best.max(v);
            any_pass = true;
        }
    }
    let grid = cfg.delta_c / 64.0;
    let level = c_prev + grid * (((best - c_prev) / grid).floor()).clamp(0.0, 64.0);
    let stalled = !any_pass;

    let mut merged = state.model.data().clone();
    for run in &runs {
        for meas in &run.raw {
            if clf.value(&meas.x) <= level {
                merged.push(&meas.x, &meas.mixing(), meas.z)?;
            }
        }
    }

    let episode_index = state.records.len() + 1;
    let opts = TrainOptions {
        restarts: 1,
        max_iters: 40,
        seed: cfg.seed.wrapping_add(episode_index as u64),
        ..TrainOptions::default()
    };
    let (kernel, _lml) = train_hyperparams(state.model.kernel(), &merged, &opts)?;
    let data_count = merged.len();
    state.model = GpModel::fit(kernel, merged)?;
    state.level = level;

    let (mean_std, max_std) = probe_statistics(&state.model, &state.probes)?;
    state.records.push(EpisodeRecord {
        index: episode_index,
        level,
        data_count,
        mean_probe_std: mean_std,
        max_probe_std: max_std,
        stalled,
        wall_time: start.elapsed().as_secs_f64(),
    });
    Ok(())
}

/// Mean and max posterior deviation over the fixed probe pairs.
pub fn probe_statistics(
    gp: &GpModel,
    probes: &[(DVector<f64>, DVector<f64>)],
) -> Result<(f64, f64), EpisodicError> {
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (x, u) in probes {
        let (_, var) = gp.predict(x, u)?;
        let s = var.max(0.0).sqrt();
        sum += s;
        max = max.max(s);
    }
    let mean = if probes.is_empty() { 0.0 } else { sum / probes.len() as f64 };
    Ok((mean, max))
}

/// Verify the seed level, collect the initial data, train the initial model,
/// and freeze the probe grid.
pub fn initialize(
    plant: &dyn ControlAffineSystem,
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    ctrl: &ControllerConfig,
    cfg: &EpisodeConfig,
) -> Result<AlgorithmState, EpisodicError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Pre-flight: the nominal model must satisfy the exponential condition
    // on sampled seed-region states, otherwise even episode zero is vacuous.
    let region = clf.sublevel(cfg.c0);
    let mut check_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let samples: Result<Vec<_>, _> = (0..200).map(|_| region.sample(&mut check_rng)).collect();
    let check = verify_exponential_condition(
        clf,
        nominal,
        ctrl.lambda,
        &ctrl.input_lo,
        &ctrl.input_hi,
        &samples?,
    );
    if !check.ok {
        return Err(EpisodicError::InitialLevelNotCertified { worst: check.worst });
    }

    let data = collect_initial(plant, nominal, clf, ctrl, cfg, &mut rng)?;
    let kernel0 = AdpKernel::homogeneous(
        nominal.input_dim() + 1,
        cfg.init_signal_variance,
        cfg.init_lengthscale,
        nominal.state_dim(),
    )?;
    let opts = TrainOptions { seed: cfg.seed, ..TrainOptions::default() };
    let (kernel, _lml) = train_hyperparams(&kernel0, &data, &opts)?;
    let model = GpModel::fit(kernel, data)?;

    // The probe grid spans the largest region the run can reach and stays
    // fixed so the per-episode statistic is comparable across episodes.
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let reach = clf.sublevel(cfg.c0 + cfg.total_episodes as f64 * cfg.delta_c);
    let mut probes = Vec::with_capacity(100);
    for _ in 0..100 {
        let x = reach.sample(&mut probe_rng)?;
        let u = uniform_box(&ctrl.input_lo, &ctrl.input_hi, &mut probe_rng);
        probes.push((x, u));
    }

    Ok(AlgorithmState { model, level: cfg.c0, records: Vec::new(), probes, rng })
}

/// Full collection loop: initialize, then `total_episodes` episodes.
/// `on_episode` fires after initialization and after every episode, giving
/// callers a checkpoint and logging hook. Deterministic given the seed.
pub fn run_algorithm(
    plant: &dyn ControlAffineSystem,
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    ctrl: &ControllerConfig,
    cfg: &EpisodeConfig,
    mut on_episode: impl FnMut(&AlgorithmState),
) -> Result<AlgorithmResult, EpisodicError> {
    let mut state = initialize(plant, nominal, clf, ctrl, cfg)?;
    on_episode(&state);
    let mut levels = vec![cfg.c0];
    let mut certified = vec![true];
    for _ in 0..cfg.total_episodes {
        run_episode(plant, nominal, clf, ctrl, cfg, &mut state)?;
        let rec = state.records.last().expect("episode just ran");
        levels.push(rec.level);
        certified.push(!rec.stalled);
        on_episode(&state);
    }
    let AlgorithmState { model, records, .. } = state;
    Ok(AlgorithmResult {
        model,
        roa: RoAEstimate { levels, certified, delta: cfg.delta },
        records,
    })
}
