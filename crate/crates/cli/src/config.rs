//! Experiment configuration: named TOML sections with strict schema checks.
//!
//! Validation enumerates every problem it can find instead of stopping at the
//! first, so a broken config can be repaired in one pass. Unknown keys are
//! rejected everywhere: a typo must fail loudly rather than silently fall
//! back to a default.

use std::path::PathBuf;

use gpclf::controllers::ControllerConfig;
use gpclf::dynamics::ControlAffineSystem;
use gpclf::episodic::EpisodeConfig;
use gpclf::systems::{BicycleParams, BicycleTracking, Pendulum, PendulumParams};
use nalgebra::{DMatrix, DVector};
use toml::value::Table;
use toml::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    Pendulum,
    Bicycle,
}

impl Benchmark {
    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::Pendulum => "pendulum",
            Benchmark::Bicycle => "bicycle",
        }
    }

    /// Dimension of the state the controllers act on (tracking-error
    /// coordinates for the bicycle).
    pub fn state_dim(self) -> usize {
        match self {
            Benchmark::Pendulum => 2,
            Benchmark::Bicycle => 4,
        }
    }

    /// Length of `sim.x0`: the bicycle starts from a full pose, which is
    /// projected onto the error coordinates.
    pub fn x0_dim(self) -> usize {
        match self {
            Benchmark::Pendulum => 2,
            Benchmark::Bicycle => 5,
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            Benchmark::Pendulum => 1,
            Benchmark::Bicycle => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub enum PlantParams {
    Pendulum(PendulumParams),
    Bicycle(BicycleParams),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub plant: PlantParams,
    pub nominal: PlantParams,
    pub lambda: f64,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub slack_penalty: f64,
    pub beta: f64,
    pub delta: f64,
    pub u_max: Vec<f64>,
    /// Collection loop parameters; `delta` and `seed` are kept in sync with
    /// the fields above.
    pub episodic: EpisodeConfig,
    pub sim_dt: f64,
    pub sim_horizon: f64,
    /// Full initial state (a pose for the bicycle).
    pub x0: Vec<f64>,
    /// Bicycle reference speed; unused by the pendulum.
    pub reference_speed: f64,
}

impl ExperimentConfig {
    pub fn plant_system(&self) -> Box<dyn ControlAffineSystem> {
        build_system(&self.plant, self.reference_speed)
    }

    pub fn nominal_system(&self) -> Box<dyn ControlAffineSystem> {
        build_system(&self.nominal, self.reference_speed)
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.q_diag))
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.r_diag))
    }

    pub fn controller_config(&self) -> Result<ControllerConfig, String> {
        let hi = DVector::from_column_slice(&self.u_max);
        let mut ctrl = ControllerConfig::new(self.lambda, -&hi, hi).map_err(|e| e.to_string())?;
        ctrl.slack_penalty = self.slack_penalty;
        ctrl.beta = self.beta;
        ctrl.validate().map_err(|e| e.to_string())?;
        Ok(ctrl)
    }

    /// Initial state in the coordinates the controllers act on.
    pub fn initial_error_state(&self) -> DVector<f64> {
        match self.benchmark {
            Benchmark::Pendulum => DVector::from_column_slice(&self.x0),
            Benchmark::Bicycle => DVector::from_column_slice(&[
                self.x0[1],
                self.x0[2] - self.reference_speed,
                self.x0[3],
                self.x0[4],
            ]),
        }
    }
}

fn build_system(params: &PlantParams, reference_speed: f64) -> Box<dyn ControlAffineSystem> {
    match params {
        PlantParams::Pendulum(p) => Box::new(Pendulum::new(p.clone())),
        PlantParams::Bicycle(p) => Box::new(BicycleTracking::new(p.clone(), reference_speed)),
    }
}

type Diags = Vec<String>;

/// Parse and validate a config. On failure the full list of diagnostics is
/// returned, one string per problem.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<String>> {
    let root: Value = match toml::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("parse error");
            return Err(vec![format!("not valid TOML: {}", first.trim())]);
        }
    };
    let Value::Table(root) = root else {
        return Err(vec!["top level must be a table".into()]);
    };
    let mut diags = Vec::new();

    for key in root.keys() {
        let known = [
            "benchmark",
            "seed",
            "output_dir",
            "plant",
            "nominal",
            "clf",
            "controller",
            "episodic",
            "sim",
        ];
        if !known.contains(&key.as_str()) {
            diags.push(format!("unknown top-level key `{key}`"));
        }
    }

    let benchmark = match root.get("benchmark") {
        None => {
            diags.push("benchmark required".into());
            None
        }
        Some(Value::String(s)) if s == "pendulum" => Some(Benchmark::Pendulum),
        Some(Value::String(s)) if s == "bicycle" => Some(Benchmark::Bicycle),
        Some(_) => {
            diags.push("benchmark must be \"pendulum\" or \"bicycle\"".into());
            None
        }
    };

    let seed = match root.get("seed") {
        None => 0,
        Some(Value::Integer(i)) if *i >= 0 => *i as u64,
        Some(_) => {
            diags.push("seed must be a nonnegative integer".into());
            0
        }
    };

    let output_dir = match root.get("output_dir") {
        None => PathBuf::from("out"),
        Some(Value::String(s)) => PathBuf::from(s),
        Some(_) => {
            diags.push("output_dir must be a string".into());
            PathBuf::from("out")
        }
    };

    let plant = section(&root, "plant", &mut diags)
        .and_then(|t| system_params(t, "plant", benchmark, &mut diags));
    let nominal = section(&root, "nominal", &mut diags)
        .and_then(|t| system_params(t, "nominal", benchmark, &mut diags));

    let mut lambda = 0.0;
    let mut q_diag = None;
    let mut r_diag = None;
    if let Some(t) = section(&root, "clf", &mut diags) {
        check_keys(t, "clf", &["lambda", "q", "r"], &mut diags);
        lambda = req_pos(t, "clf", "lambda", &mut diags).unwrap_or(0.0);
        q_diag = req_pos_array(t, "clf", "q", &mut diags);
        r_diag = req_pos_array(t, "clf", "r", &mut diags);
        if let (Some(b), Some(q)) = (benchmark, &q_diag) {
            if q.len() != b.state_dim() {
                diags.push(format!(
                    "clf.q must have {} entries for the {} benchmark",
                    b.state_dim(),
                    b.as_str()
                ));
            }
        }
        if let (Some(b), Some(r)) = (benchmark, &r_diag) {
            if r.len() != b.input_dim() {
                diags.push(format!(
                    "clf.r must have {} entries for the {} benchmark",
                    b.input_dim(),
                    b.as_str()
                ));
            }
        }
    }

    let mut u_max = None;
    let mut slack_penalty = 1e3;
    let mut beta = 2.0;
    let mut delta = 0.05;
    if let Some(t) = section(&root, "controller", &mut diags) {
        check_keys(t, "controller", &["u_max", "slack_penalty", "beta", "delta"], &mut diags);
        u_max = req_pos_array(t, "controller", "u_max", &mut diags);
        slack_penalty = opt_pos(t, "controller", "slack_penalty", 1e3, &mut diags);
        beta = opt_nonneg(t, "controller", "beta", 2.0, &mut diags);
        delta = opt_float(t, "controller", "delta", 0.05, &mut diags);
        if !(delta > 0.0 && delta < 1.0) {
            diags.push("controller.delta must lie in (0, 1)".into());
            delta = 0.05;
        }
        if let (Some(b), Some(u)) = (benchmark, &u_max) {
            if u.len() != b.input_dim() {
                diags.push(format!(
                    "controller.u_max must have {} entries for the {} benchmark",
                    b.input_dim(),
                    b.as_str()
                ));
            }
        }
    }

    let defaults = EpisodeConfig::default();
    let mut episodic = defaults.clone();
    if let Some(t) = section_opt(&root, "episodic", &mut diags) {
        check_keys(
            t,
            "episodic",
            &[
                "c0",
                "delta_c",
                "n_exploration",
                "rollout_steps",
                "rollout_dt",
                "candidate_pool_size",
                "total_episodes",
                "initial_rollouts",
                "noise_std",
                "init_signal_variance",
                "init_lengthscale",
            ],
            &mut diags,
        );
        episodic.c0 = opt_pos(t, "episodic", "c0", defaults.c0, &mut diags);
        episodic.delta_c = opt_pos(t, "episodic", "delta_c", defaults.delta_c, &mut diags);
        episodic.n_exploration =
            opt_usize(t, "episodic", "n_exploration", defaults.n_exploration, &mut diags);
        episodic.rollout_steps =
            opt_usize(t, "episodic", "rollout_steps", defaults.rollout_steps, &mut diags);
        episodic.rollout_dt = opt_pos(t, "episodic", "rollout_dt", defaults.rollout_dt, &mut diags);
        episodic.candidate_pool_size = opt_usize(
            t,
            "episodic",
            "candidate_pool_size",
            defaults.candidate_pool_size,
            &mut diags,
        );
        episodic.total_episodes =
            opt_usize(t, "episodic", "total_episodes", defaults.total_episodes, &mut diags);
        episodic.initial_rollouts =
            opt_usize(t, "episodic", "initial_rollouts", defaults.initial_rollouts, &mut diags);
        episodic.noise_std = opt_pos(t, "episodic", "noise_std", defaults.noise_std, &mut diags);
        episodic.init_signal_variance = opt_pos(
            t,
            "episodic",
            "init_signal_variance",
            defaults.init_signal_variance,
            &mut diags,
        );
        episodic.init_lengthscale =
            opt_pos(t, "episodic", "init_lengthscale", defaults.init_lengthscale, &mut diags);
    }
    episodic.delta = delta;
    episodic.seed = seed;
    if let Err(e) = episodic.validate() {
        diags.push(format!("episodic: {e}"));
    }

    let mut sim_dt = 0.0;
    let mut sim_horizon = 0.0;
    let mut x0 = None;
    let mut reference_speed = 0.0;
    if let Some(t) = section(&root, "sim", &mut diags) {
        let mut allowed = vec!["dt", "horizon", "x0"];
        if benchmark == Some(Benchmark::Bicycle) {
            allowed.push("reference_speed");
        }
        check_keys(t, "sim", &allowed, &mut diags);
        sim_dt = req_pos(t, "sim", "dt", &mut diags).unwrap_or(0.0);
        sim_horizon = req_pos(t, "sim", "horizon", &mut diags).unwrap_or(0.0);
        if sim_dt > 0.0 && sim_horizon > 0.0 && sim_horizon < sim_dt {
            diags.push("sim.horizon must be at least sim.dt".into());
        }
        x0 = req_float_array(t, "sim", "x0", &mut diags);
        if let (Some(b), Some(x)) = (benchmark, &x0) {
            if x.len() != b.x0_dim() {
                diags.push(format!(
                    "sim.x0 must have {} entries for the {} benchmark",
                    b.x0_dim(),
                    b.as_str()
                ));
            }
        }
        if benchmark == Some(Benchmark::Bicycle) {
            reference_speed = req_pos(t, "sim", "reference_speed", &mut diags).unwrap_or(0.0);
        }
    }

    if !diags.is_empty() {
        return Err(diags);
    }
    // Every failure path above records a diagnostic, so with none recorded
    // all the required options are populated.
    Ok(ExperimentConfig {
        benchmark: benchmark.expect("validated"),
        seed,
        output_dir,
        plant: plant.expect("validated"),
        nominal: nominal.expect("validated"),
        lambda,
        q_diag: q_diag.expect("validated"),
        r_diag: r_diag.expect("validated"),
        slack_penalty,
        beta,
        delta,
        u_max: u_max.expect("validated"),
        episodic,
        sim_dt,
        sim_horizon,
        x0: x0.expect("validated"),
        reference_speed,
    })
}

fn system_params(
    t: &Table,
    sec: &str,
    benchmark: Option<Benchmark>,
    diags: &mut Diags,
) -> Option<PlantParams> {
    match benchmark? {
        Benchmark::Pendulum => {
            check_keys(t, sec, &["mass", "length", "gravity", "damping"], diags);
            let mass = req_pos(t, sec, "mass", diags);
            let length = req_pos(t, sec, "length", diags);
            let gravity = opt_pos(t, sec, "gravity", 9.81, diags);
            let damping = opt_nonneg(t, sec, "damping", 0.1, diags);
            Some(PlantParams::Pendulum(PendulumParams {
                mass: mass?,
                length: length?,
                gravity,
                damping,
            }))
        }
        Benchmark::Bicycle => {
            check_keys(t, sec, &["friction", "accel_gain", "steer_gain"], diags);
            let friction = req_nonneg(t, sec, "friction", diags);
            let accel_gain = req_pos(t, sec, "accel_gain", diags);
            let steer_gain = req_pos(t, sec, "steer_gain", diags);
            Some(PlantParams::Bicycle(BicycleParams {
                friction: friction?,
                accel_gain: accel_gain?,
                steer_gain: steer_gain?,
            }))
        }
    }
}

fn section<'v>(root: &'v Table, name: &str, diags: &mut Diags) -> Option<&'v Table> {
    match root.get(name) {
        None => {
            diags.push(format!("[{name}] section required"));
            None
        }
        Some(Value::Table(t)) => Some(t),
        Some(_) => {
            diags.push(format!("[{name}] must be a table"));
            None
        }
    }
}

fn section_opt<'v>(root: &'v Table, name: &str, diags: &mut Diags) -> Option<&'v Table> {
    match root.get(name) {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(_) => {
            diags.push(format!("[{name}] must be a table"));
            None
        }
    }
}

fn check_keys(t: &Table, sec: &str, allowed: &[&str], diags: &mut Diags) {
    for key in t.keys() {
        if !allowed.contains(&key.as_str()) {
            diags.push(format!("unknown key `{key}` in [{sec}]"));
        }
    }
}

fn as_float(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn req_float(t: &Table, sec: &str, key: &str, diags: &mut Diags) -> Option<f64> {
    match t.get(key) {
        None => {
            diags.push(format!("{sec}.{key} required"));
            None
        }
        Some(v) => match as_float(v) {
            Some(f) if f.is_finite() => Some(f),
            _ => {
                diags.push(format!("{sec}.{key} must be a finite number"));
                None
            }
        },
    }
}

fn req_pos(t: &Table, sec: &str, key: &str, diags: &mut Diags) -> Option<f64> {
    let f = req_float(t, sec, key, diags)?;
    if f > 0.0 {
        Some(f)
    } else {
        diags.push(format!("{sec}.{key} must be positive"));
        None
    }
}

fn req_nonneg(t: &Table, sec: &str, key: &str, diags: &mut Diags) -> Option<f64> {
    let f = req_float(t, sec, key, diags)?;
    if f >= 0.0 {
        Some(f)
    } else {
        diags.push(format!("{sec}.{key} must be nonnegative"));
        None
    }
}

fn opt_float(t: &Table, sec: &str, key: &str, default: f64, diags: &mut Diags) -> f64 {
    match t.get(key) {
        None => default,
        Some(v) => match as_float(v) {
            Some(f) if f.is_finite() => f,
            _ => {
                diags.push(format!("{sec}.{key} must be a finite number"));
                default
            }
        },
    }
}

fn opt_pos(t: &Table, sec: &str, key: &str, default: f64, diags: &mut Diags) -> f64 {
    let f = opt_float(t, sec, key, default, diags);
    if f > 0.0 {
        f
    } else {
        diags.push(format!("{sec}.{key} must be positive"));
        default
    }
}

fn opt_nonneg(t: &Table, sec: &str, key: &str, default: f64, diags: &mut Diags) -> f64 {
    let f = opt_float(t, sec, key, default, diags);
    if f >= 0.0 {
        f
    } else {
        diags.push(format!("{sec}.{key} must be nonnegative"));
        default
    }
}

fn opt_usize(t: &Table, sec: &str, key: &str, default: usize, diags: &mut Diags) -> usize {
    match t.get(key) {
        None => default,
        Some(Value::Integer(i)) if *i >= 0 => *i as usize,
        Some(_) => {
            diags.push(format!("{sec}.{key} must be a nonnegative integer"));
            default
        }
    }
}

fn req_float_array(t: &Table, sec: &str, key: &str, diags: &mut Diags) -> Option<Vec<f64>> {
    let entries = req_array(t, sec, key, diags)?;
    let mut out = Vec::with_capacity(entries.len());
    for item in entries {
        match as_float(item) {
            Some(f) if f.is_finite() => out.push(f),
            _ => {
                diags.push(format!("{sec}.{key} entries must be finite numbers"));
                return None;
            }
        }
    }
    Some(out)
}

fn req_pos_array(t: &Table, sec: &str, key: &str, diags: &mut Diags) -> Option<Vec<f64>> {
    let entries = req_float_array(t, sec, key, diags)?;
    if entries.iter().all(|&f| f > 0.0) {
        Some(entries)
    } else {
        diags.push(format!("{sec}.{key} entries must be positive"));
        None
    }
}

fn req_array<'v>(t: &'v Table, sec: &str, key: &str, diags: &mut Diags) -> Option<&'v Vec<Value>> {
    match t.get(key) {
        None => {
            diags.push(format!("{sec}.{key} required"));
            None
        }
        Some(Value::Array(items)) => Some(items),
        Some(_) => {
            diags.push(format!("{sec}.{key} must be an array of numbers"));
            None
        }
    }
}
