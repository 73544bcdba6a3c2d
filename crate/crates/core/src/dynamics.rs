//! Control-affine dynamics `xdot = f(x) + g(x) u`, integration, rollouts,
//! and the mismatch measurements fed to the GP.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clf::QuadraticClf;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("state became non-finite during integration")]
    NonFiniteState,
    #[error("dimension mismatch: system expects state {state} / input {input}")]
    DimensionMismatch { state: usize, input: usize },
    #[error("horizon and dt must be positive with horizon >= dt")]
    BadTimeGrid,
}

/// `Sync` so rollouts over one model can run on worker threads.
pub trait ControlAffineSystem: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Drift field `f(x)`.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Actuation matrix `g(x)`, `n x m`.
    fn actuation(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.actuation(x) * u
    }
}

/// One classical Runge-Kutta step with the input held constant.
pub fn step_rk4(
    sys: &dyn ControlAffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, DynamicsError> {
    if x.len() != sys.state_dim() || u.len() != sys.input_dim() {
        return Err(DynamicsError::DimensionMismatch {
            state: sys.state_dim(),
            input: sys.input_dim(),
        });
    }
    let k1 = sys.derivative(x, u);
    let k2 = sys.derivative(&(x + 0.5 * dt * &k1), u);
    let k3 = sys.derivative(&(x + 0.5 * dt * &k2), u);
    let k4 = sys.derivative(&(x + dt * &k3), u);
    let next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFiniteState);
    }
    Ok(next)
}

/// Decision returned by a feedback controller at one state.
#[derive(Debug, Clone)]
pub struct ControlDecision {
    pub u: DVector<f64>,
    /// CLF constraint relaxation actually used (0 when the constraint held).
    pub slack: f64,
    pub status: StepStatus,
    /// Wall-clock seconds spent inside the controller.
    pub solve_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepStatus {
    Ok,
    /// Solver failed; the configured fallback input was applied.
    Fallback,
}

impl StepStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepStatus::Ok => "ok",
            StepStatus::Fallback => "fallback",
        }
    }
}

pub trait Controller {
    fn decide(&self, x: &DVector<f64>) -> ControlDecision;
}

#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub v: f64,
    pub slack: f64,
    pub status: StepStatus,
    pub solve_time: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub dt: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        &self.steps.last().expect("trajectory has at least the initial record").x
    }

    pub fn final_v(&self) -> f64 {
        self.steps.last().expect("trajectory has at least the initial record").v
    }

    /// First time at which `V` drops to `level` and stays measurable there.
    pub fn time_to_level(&self, level: f64) -> Option<f64> {
        self.steps.iter().find(|s| s.v <= level).map(|s| s.t)
    }

    pub fn fallback_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        let n = self.steps.iter().filter(|s| s.status == StepStatus::Fallback).count();
        n as f64 / self.steps.len() as f64
    }

    /// Steps whose slack exceeds `tol`.
    pub fn slack_activations(&self, tol: f64) -> usize {
        self.steps.iter().filter(|s| s.slack > tol).count()
    }

    pub fn mean_solve_time(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.solve_time).sum::<f64>() / self.steps.len() as f64
    }

    pub fn max_solve_time(&self) -> f64 {
        self.steps.iter().map(|s| s.solve_time).fold(0.0, f64::max)
    }

    /// CSV with header `t,x1..xn,u1..um,V,status`; floats carry 17
    /// significant digits so repeated runs can be compared byte for byte.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.steps.first() {
            out.push('t');
            for i in 0..first.x.len() {
                out.push_str(&format!(",x{}", i + 1));
            }
            for i in 0..first.u.len() {
                out.push_str(&format!(",u{}", i + 1));
            }
            out.push_str(",V,status\n");
        }
        for step in &self.steps {
            out.push_str(&fmt17(step.t));
            for v in step.x.iter() {
                out.push(',');
                out.push_str(&fmt17(*v));
            }
            for v in step.u.iter() {
                out.push(',');
                out.push_str(&fmt17(*v));
            }
            out.push(',');
            out.push_str(&fmt17(step.v));
            out.push(',');
            out.push_str(step.status.as_str());
            out.push('\n');
        }
        out
    }
}

/// 17 significant decimal digits: enough to round-trip any f64 exactly.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Simulate the plant under a feedback controller. The final record carries
/// the input the controller would apply at the final state, so every row has
/// the same shape.
pub fn rollout(
    plant: &dyn ControlAffineSystem,
    controller: &dyn Controller,
    clf: &QuadraticClf,
    x0: &DVector<f64>,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory, DynamicsError> {
    if !(dt > 0.0 && horizon >= dt && dt.is_finite() && horizon.is_finite()) {
        return Err(DynamicsError::BadTimeGrid);
    }
    let n_steps = (horizon / dt).round() as usize;
    let mut steps = Vec::with_capacity(n_steps + 1);
    let mut x = x0.clone();
    for k in 0..=n_steps {
        let decision = controller.decide(&x);
        let t = k as f64 * dt;
        steps.push(TrajectoryStep {
            t,
            x: x.clone(),
            u: decision.u.clone(),
            v: clf.value(&x),
            slack: decision.slack,
            status: decision.status,
            solve_time: decision.solve_time,
        });
        if k < n_steps {
            x = step_rk4(plant, &x, &decision.u, dt)?;
        }
    }
    Ok(Trajectory { steps, dt })
}

/// One GP training sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measurement {
    /// Midpoint state the sample is attributed to.
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    /// Lyapunov-derivative mismatch label.
    pub z: f64,
}

impl Measurement {
    /// Mixing vector `[1, u^T]^T`.
    pub fn mixing(&self) -> DVector<f64> {
        let mut y = DVector::zeros(self.u.len() + 1);
        y[0] = 1.0;
        y.rows_mut(1, self.u.len()).copy_from(&self.u);
        y
    }
}

/// Build a mismatch measurement from one transition `x_t -> x_next` under
/// constant input `u`. The label is the finite-difference Lyapunov
/// derivative minus the nominal model's prediction, both evaluated at the
/// midpoint state, which cancels the leading discretization error term:
///
/// ```text
/// z = (V(x_next) - V(x_t)) / dt - Vdot_nominal(x_mid, u),  x_mid = (x_t + x_next)/2
/// ```
pub fn make_measurement(
    clf: &QuadraticClf,
    nominal: &dyn ControlAffineSystem,
    x_t: &DVector<f64>,
    x_next: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Measurement {
    let x_mid = 0.5 * (x_t + x_next);
    let (lf, lg) = clf.lie_derivatives(nominal, &x_mid);
    let vdot_nominal = lf + lg.dot(u);
    let z = (clf.value(x_next) - clf.value(x_t)) / dt - vdot_nominal;
    Measurement { x: x_mid, u: u.clone(), z }
}
