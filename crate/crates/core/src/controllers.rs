//! Min-norm CLF feedback laws: the model-based CLF-QP, the uncertainty-aware
//! GP-CLF-SOCP, and the state-only GP-CLF-QP baseline.
//!
//! All three minimize `u^T u + p d^2` over the input box subject to an
//! exponential-stability constraint relaxed by the slack `d >= 0`; they
//! differ in how the Lyapunov derivative is estimated. Solver trouble never
//! panics: the configured fallback input is returned with the step flagged.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::clf::QuadraticClf;
use crate::conic::{self, ConicError, ConicProgram, SocConstraint, SolveStatus, SolverOptions};
use crate::dynamics::{ControlAffineSystem, ControlDecision, Controller, StepStatus};
use crate::gp::{GpError, GpModel};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error("decay rate lambda must be positive and finite, got {0}")]
    BadLambda(f64),
    #[error("slack penalty must be positive and finite, got {0}")]
    BadPenalty(f64),
    #[error("confidence scale beta must be nonnegative and finite, got {0}")]
    BadBeta(f64),
    #[error("input box must satisfy lo <= 0 <= hi componentwise")]
    BadBox,
    #[error("fallback input must lie inside the input box")]
    BadFallback,
}

/// Shared parameters of the three controllers.
///
/// `lambda` is the exponential rate in the constraint
/// `Vdot + lambda V <= d`, `slack_penalty` the weight `p` on `d^2` in the
/// objective, and `beta` the multiplier on the posterior standard deviation
/// for the GP-based variants (ignored by [`clf_qp`]).
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub lambda: f64,
    pub slack_penalty: f64,
    pub beta: f64,
    pub input_lo: DVector<f64>,
    pub input_hi: DVector<f64>,
    /// Input applied when the solver fails; must lie in the box.
    pub fallback: DVector<f64>,
    pub solver: SolverOptions,
}

impl ControllerConfig {
    /// Config with default penalty `1e3`, confidence `beta = 2`, zero
    /// fallback, and default solver settings.
    pub fn new(
        lambda: f64,
        input_lo: DVector<f64>,
        input_hi: DVector<f64>,
    ) -> Result<Self, ControllerError> {
        let m = input_lo.len();
        let cfg = Self {
            lambda,
            slack_penalty: 1e3,
            beta: 2.0,
            input_lo,
            input_hi,
            fallback: DVector::zeros(m),
            solver: SolverOptions::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Symmetric box `[-u_max, u_max]^m`.
    pub fn symmetric(lambda: f64, u_max: f64, m: usize) -> Result<Self, ControllerError> {
        Self::new(lambda, DVector::from_element(m, -u_max), DVector::from_element(m, u_max))
    }

    /// Re-check the invariants after any direct field edits.
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(ControllerError::BadLambda(self.lambda));
        }
        if !(self.slack_penalty > 0.0 && self.slack_penalty.is_finite()) {
            return Err(ControllerError::BadPenalty(self.slack_penalty));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ControllerError::BadBeta(self.beta));
        }
        let m = self.input_lo.len();
        let box_ok = self.input_hi.len() == m
            && (0..m).all(|i| self.input_lo[i] <= 0.0 && 0.0 <= self.input_hi[i]);
        if !box_ok {
            return Err(ControllerError::BadBox);
        }
        if self.fallback.len() != m || !self.contains(&self.fallback) {
            return Err(ControllerError::BadFallback);
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_lo.len()
    }

    /// Exact componentwise box membership.
    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.len() == self.input_lo.len()
            && u.iter().enumerate().all(|(i, &v)| self.input_lo[i] <= v && v <= self.input_hi[i])
    }

    /// Project onto the box; the solver's answer can sit a round-off outside.
    fn clamp(&self, mut u: DVector<f64>) -> DVector<f64> {
        for i in 0..u.len() {
            u[i] = u[i].clamp(self.input_lo[i], self.input_hi[i]);
        }
        u
    }

    fn fallback_decision(&self, start: Instant) -> ControlDecision {
        ControlDecision {
            u: self.fallback.clone(),
            slack: 0.0,
            status: StepStatus::Fallback,
            solve_time: start.elapsed().as_secs_f64(),
        }
    }
}

/// Shared QP core: minimize `u^T u + p d^2` subject to `lg^T u - d <= rhs`
/// and the input box. [`clf_qp`] and the baseline differ only in `rhs`.
fn solve_relaxed_qp(
    lg: &DVector<f64>,
    rhs: f64,
    cfg: &ControllerConfig,
    start: Instant,
) -> ControlDecision {
    let m = lg.len();
    let mut h = DMatrix::<f64>::identity(m + 1, m + 1) * 2.0;
    h[(m, m)] = 2.0 * cfg.slack_penalty;
    let q = DVector::zeros(m + 1);

    let mut lin = Vec::with_capacity(2 * m + 1);
    let mut row = DVector::zeros(m + 1);
    row.rows_mut(0, m).copy_from(lg);
    row[m] = -1.0;
    lin.push((row, rhs));
    for i in 0..m {
        let mut up = DVector::zeros(m + 1);
        up[i] = 1.0;
        lin.push((up, cfg.input_hi[i]));
        let mut dn = DVector::zeros(m + 1);
        dn[i] = -1.0;
        lin.push((dn, -cfg.input_lo[i]));
    }

    match conic::solve_qp(&h, &q, &lin, &cfg.solver) {
        Ok(res) if res.status == SolveStatus::Optimal => ControlDecision {
            u: cfg.clamp(res.w.rows(0, m).into_owned()),
            slack: res.w[m].max(0.0),
            status: StepStatus::Ok,
            solve_time: start.elapsed().as_secs_f64(),
        },
        _ => cfg.fallback_decision(start),
    }
}

/// Min-norm exponentially stabilizing controller on a known model:
/// minimize `u^T u + p d^2` subject to `LfV + LgV u + lambda V <= d`, `u` in
/// the box. Solver failure returns the fallback input with a flagged status.
pub fn clf_qp(
    sys: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    cfg: &ControllerConfig,
    x: &DVector<f64>,
) -> ControlDecision {
    let start = Instant::now();
    let (lf, lg) = clf.lie_derivatives(sys, x);
    let rhs = -(lf + cfg.lambda * clf.value(x));
    solve_relaxed_qp(&lg, rhs, cfg, start)
}

fn build_socp(
    lf: f64,
    lg: &DVector<f64>,
    v: f64,
    post_b: &DVector<f64>,
    factors: &crate::gp::SocpFactors,
    cfg: &ControllerConfig,
) -> Result<ConicProgram, ConicError> {
    let m = lg.len();
    let dim = m + 2;

    // Decision (u, d, t): minimize t with ||Diag(I, sqrt(p)) (u, d)|| <= t,
    // so t* = sqrt(u^T u + p d^2) and the argmin matches the quadratic
    // objective.
    let mut c = DVector::zeros(dim);
    c[m + 1] = 1.0;
    let mut prog = ConicProgram::new(c);

    let mut a_obj = DMatrix::zeros(m + 1, dim);
    for i in 0..m {
        a_obj[(i, i)] = 1.0;
    }
    a_obj[(m, m)] = cfg.slack_penalty.sqrt();
    let mut g_obj = DVector::zeros(dim);
    g_obj[m + 1] = 1.0;
    prog.push_soc(SocConstraint { a: a_obj, b: DVector::zeros(m + 1), g: g_obj, h: 0.0 })?;

    // Chance constraint
    // `beta ||M u + n|| <= d - (LgV + b_u)^T u - (LfV + b_0 + lambda V)`
    // with `mu* = b_0 + b_u^T u` and `sigma* = ||M u + n||`.
    let rows = factors.constant.len();
    let mut a = DMatrix::zeros(rows, dim);
    a.view_mut((0, 0), (rows, m)).copy_from(&(cfg.beta * &factors.input_cols));
    let b = cfg.beta * &factors.constant;
    let mut g = DVector::zeros(dim);
    for i in 0..m {
        g[i] = -(lg[i] + post_b[i + 1]);
    }
    g[m] = 1.0;
    let h = -(lf + post_b[0] + cfg.lambda * v);
    prog.push_soc(SocConstraint { a, b, g, h })?;

    for i in 0..m {
        let mut up = DVector::zeros(dim);
        up[i] = 1.0;
        prog.push_linear(up, cfg.input_hi[i])?;
        let mut dn = DVector::zeros(dim);
        dn[i] = -1.0;
        prog.push_linear(dn, -cfg.input_lo[i])?;
    }
    Ok(prog)
}

/// The exact conic program [`gp_clf_socp`] solves at `x`, exposed so failed
/// solves can be dumped and replayed.
pub fn socp_program(
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    gp: &GpModel,
    cfg: &ControllerConfig,
    x: &DVector<f64>,
) -> Result<ConicProgram, ControllerError> {
    let (lf, lg) = clf.lie_derivatives(nominal, x);
    let post = gp.posterior_adp(x)?;
    let factors = gp.socp_factors(&post)?;
    Ok(build_socp(lf, &lg, clf.value(x), &post.b, &factors, cfg)?)
}

/// GP-CLF-SOCP: the relaxed min-norm program with the Lyapunov derivative
/// inflated by the learned mismatch bound `mu*(x, u) + beta sigma*(x, u)`.
/// The model must use the compound kernel with `p = m + 1`.
pub fn gp_clf_socp(
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    gp: &GpModel,
    cfg: &ControllerConfig,
    x: &DVector<f64>,
) -> ControlDecision {
    let start = Instant::now();
    let m = nominal.input_dim();
    let Ok(prog) = socp_program(nominal, clf, gp, cfg, x) else {
        return cfg.fallback_decision(start);
    };

    match conic::solve(&prog, &cfg.solver) {
        Ok(res) if res.status == SolveStatus::Optimal => ControlDecision {
            u: cfg.clamp(res.w.rows(0, m).into_owned()),
            slack: res.w[m].max(0.0),
            status: StepStatus::Ok,
            solve_time: start.elapsed().as_secs_f64(),
        },
        _ => cfg.fallback_decision(start),
    }
}

/// Baseline that only learns the drift mismatch: a standard GP on `x` alone
/// supplies `mu_1(x)` and `sigma_1(x)`, which enter the CLF-QP as constants
/// at each state. The model must have a single base kernel (`p = 1`).
pub fn gp_clf_qp_baseline(
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    gp: &GpModel,
    cfg: &ControllerConfig,
    x: &DVector<f64>,
) -> ControlDecision {
    let start = Instant::now();
    let (lf, lg) = clf.lie_derivatives(nominal, x);
    let Ok(post) = gp.posterior_adp(x) else { return cfg.fallback_decision(start) };
    let mu = post.b[0];
    let sigma = post.c[(0, 0)].max(0.0).sqrt();
    let rhs = -(lf + mu + cfg.beta * sigma + cfg.lambda * clf.value(x));
    solve_relaxed_qp(&lg, rhs, cfg, start)
}

/// Chance-constraint left-hand side at `(x, u)`, recomputed from the
/// structured posterior without the solver:
/// `Vdot_nominal + mu* + beta sigma* + lambda V`. At an optimal answer this
/// stays below the returned slack up to solver tolerance.
pub fn socp_constraint_value(
    nominal: &dyn ControlAffineSystem,
    clf: &QuadraticClf,
    gp: &GpModel,
    cfg: &ControllerConfig,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64, GpError> {
    let (lf, lg) = clf.lie_derivatives(nominal, x);
    let post = gp.posterior_adp(x)?;
    let mut y = DVector::zeros(u.len() + 1);
    y[0] = 1.0;
    y.rows_mut(1, u.len()).copy_from(u);
    Ok(lf + lg.dot(u) + post.mean(&y) + cfg.beta * post.std(&y) + cfg.lambda * clf.value(x))
}

/// [`Controller`] adapter for [`clf_qp`] against a fixed model.
pub struct ClfQp<'a> {
    pub sys: &'a dyn ControlAffineSystem,
    pub clf: &'a QuadraticClf,
    pub cfg: &'a ControllerConfig,
}

impl Controller for ClfQp<'_> {
    fn decide(&self, x: &DVector<f64>) -> ControlDecision {
        clf_qp(self.sys, self.clf, self.cfg, x)
    }
}

/// [`Controller`] adapter for [`gp_clf_socp`].
pub struct GpClfSocp<'a> {
    pub nominal: &'a dyn ControlAffineSystem,
    pub clf: &'a QuadraticClf,
    pub gp: &'a GpModel,
    pub cfg: &'a ControllerConfig,
}

impl Controller for GpClfSocp<'_> {
    fn decide(&self, x: &DVector<f64>) -> ControlDecision {
        gp_clf_socp(self.nominal, self.clf, self.gp, self.cfg, x)
    }
}

/// [`Controller`] adapter for [`gp_clf_qp_baseline`].
pub struct GpClfQp<'a> {
    pub nominal: &'a dyn ControlAffineSystem,
    pub clf: &'a QuadraticClf,
    pub gp: &'a GpModel,
    pub cfg: &'a ControllerConfig,
}

impl Controller for GpClfQp<'_> {
    fn decide(&self, x: &DVector<f64>) -> ControlDecision {
        gp_clf_qp_baseline(self.nominal, self.clf, self.gp, self.cfg, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::clf::{clf_from_lqr, vdot_mismatch};
    use crate::dynamics::rollout;
    use crate::gp::TrainingSet;
    use crate::kernels::AdpKernel;
    use crate::systems::{Pendulum, PendulumParams};

    struct Integrator;

    impl ControlAffineSystem for Integrator {
        fn state_dim(&self) -> usize {
            1
        }

        fn input_dim(&self) -> usize {
            1
        }

        fn drift(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(1)
        }

        fn actuation(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::identity(1, 1)
        }
    }

    /// Nominal model plus a constant drift offset; the mismatch is then
    /// linear in the state and input-free.
    struct DriftShift<'a> {
        inner: &'a Pendulum,
        shift: DVector<f64>,
    }

    impl ControlAffineSystem for DriftShift<'_> {
        fn state_dim(&self) -> usize {
            self.inner.state_dim()
        }

        fn input_dim(&self) -> usize {
            self.inner.input_dim()
        }

        fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
            self.inner.drift(x) + &self.shift
        }

        fn actuation(&self, x: &DVector<f64>) -> DMatrix<f64> {
            self.inner.actuation(x)
        }
    }

    fn pendulum() -> Pendulum {
        Pendulum::new(PendulumParams { mass: 1.0, length: 1.0, gravity: 9.81, damping: 0.1 })
    }

    fn pendulum_clf() -> QuadraticClf {
        clf_from_lqr(&pendulum(), &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap()
    }

    /// GP trained on exact mismatch labels of the heavy-plant pendulum.
    fn trained_pendulum_gp(n: usize, seed: u64) -> (Pendulum, Pendulum, QuadraticClf, GpModel) {
        let nominal = pendulum();
        let plant = Pendulum::new(PendulumParams { mass: 2.0, ..*nominal.params() });
        let clf = pendulum_clf();
        let mut data = TrainingSet::empty(2, 2, 1e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n {
            let x = dvector![rng.random_range(-1.2..1.2), rng.random_range(-1.5..1.5)];
            let u = dvector![rng.random_range(-8.0..8.0)];
            let z = vdot_mismatch(&clf, &plant, &nominal, &x, &u);
            data.push(&x, &dvector![1.0, u[0]], z).unwrap();
        }
        let kernel = AdpKernel::homogeneous(2, 1.0, 1.5, 2).unwrap();
        let gp = GpModel::fit(kernel, data).unwrap();
        (nominal, plant, clf, gp)
    }

    #[test]
    fn clf_qp_at_origin_returns_zero() {
        let sys = pendulum();
        let clf = pendulum_clf();
        let cfg = ControllerConfig::symmetric(1.0, 5.0, 1).unwrap();
        let dec = clf_qp(&sys, &clf, &cfg, &dvector![0.0, 0.0]);
        assert_eq!(dec.status, StepStatus::Ok);
        assert_abs_diff_eq!(dec.u[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(dec.slack, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn clf_qp_matches_scalar_kkt_optimum() {
        // For x_dot = u, V = x^2, lambda = 1, x = 1 the constraint reads
        // 2u + 1 <= d and the KKT point is u = -2p/(4p+1), d = 1/(4p+1).
        let sys = Integrator;
        let clf = QuadraticClf::new(dmatrix![1.0]).unwrap();
        let mut cfg = ControllerConfig::symmetric(1.0, 10.0, 1).unwrap();
        let x = dvector![1.0];

        let dec = clf_qp(&sys, &clf, &cfg, &x);
        assert_eq!(dec.status, StepStatus::Ok);
        assert_abs_diff_eq!(dec.u[0], -2000.0 / 4001.0, epsilon = 1e-6);
        assert_abs_diff_eq!(dec.slack, 1.0 / 4001.0, epsilon = 1e-6);

        cfg.slack_penalty = 1e6;
        let dec = clf_qp(&sys, &clf, &cfg, &x);
        assert_abs_diff_eq!(dec.u[0], -0.5, epsilon = 1e-4);
    }

    #[test]
    fn clf_qp_saturates_on_the_box_and_pays_slack() {
        // lambda = 50 asks for u near -25; the box stops at -10 and the
        // slack picks up the remaining 2(-10) + 50 = 30.
        let sys = Integrator;
        let clf = QuadraticClf::new(dmatrix![1.0]).unwrap();
        let cfg = ControllerConfig::symmetric(50.0, 10.0, 1).unwrap();
        let dec = clf_qp(&sys, &clf, &cfg, &dvector![1.0]);
        assert_eq!(dec.status, StepStatus::Ok);
        assert!(cfg.contains(&dec.u));
        assert_abs_diff_eq!(dec.u[0], -10.0, epsilon = 1e-4);
        assert_abs_diff_eq!(dec.slack, 30.0, epsilon = 1e-3);
    }

    #[test]
    fn clf_qp_decays_pendulum_exponentially() {
        let sys = pendulum();
        let clf = pendulum_clf();
        let cfg = ControllerConfig::symmetric(1.0, 8.0, 1).unwrap();
        let controller = ClfQp { sys: &sys, clf: &clf, cfg: &cfg };
        let x0 = dvector![0.4, 0.0];
        let traj = rollout(&sys, &controller, &clf, &x0, 4.0, 0.01).unwrap();
        assert_eq!(traj.fallback_fraction(), 0.0);
        // The active relaxed constraint always pays slack of order
        // rhs / (4p + 1); material activations are what must be absent.
        assert_eq!(traj.slack_activations(1e-2), 0);
        let v0 = traj.steps[0].v;
        // Continuous-time guarantee is V(t) <= V0 e^{-t}; leave margin for
        // the zero-order hold.
        for s in &traj.steps {
            assert!(s.v <= v0 * (-0.9 * s.t).exp() + 1e-9, "V = {} at t = {}", s.v, s.t);
        }
    }

    #[test]
    fn socp_with_no_data_and_zero_beta_matches_clf_qp() {
        let sys = pendulum();
        let clf = pendulum_clf();
        let mut cfg = ControllerConfig::symmetric(1.0, 8.0, 1).unwrap();
        cfg.beta = 0.0;
        let kernel = AdpKernel::homogeneous(2, 1.0, 1.0, 2).unwrap();
        let gp = GpModel::fit(kernel, TrainingSet::empty(2, 2, 0.1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let qp = clf_qp(&sys, &clf, &cfg, &x);
            let socp = gp_clf_socp(&sys, &clf, &gp, &cfg, &x);
            assert_eq!(socp.status, StepStatus::Ok);
            assert_abs_diff_eq!(socp.u[0], qp.u[0], epsilon = 1e-6);
            assert_abs_diff_eq!(socp.slack, qp.slack, epsilon = 1e-6);
        }
    }

    #[test]
    fn baseline_with_no_data_and_zero_beta_matches_clf_qp() {
        let sys = pendulum();
        let clf = pendulum_clf();
        let mut cfg = ControllerConfig::symmetric(1.0, 8.0, 1).unwrap();
        cfg.beta = 0.0;
        let kernel = AdpKernel::homogeneous(1, 1.0, 1.0, 2).unwrap();
        let gp = GpModel::fit(kernel, TrainingSet::empty(2, 1, 0.1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let qp = clf_qp(&sys, &clf, &cfg, &x);
            let base = gp_clf_qp_baseline(&sys, &clf, &gp, &cfg, &x);
            assert_eq!(base.status, StepStatus::Ok);
            assert_abs_diff_eq!(base.u[0], qp.u[0], epsilon = 1e-6);
            assert_abs_diff_eq!(base.slack, qp.slack, epsilon = 1e-6);
        }
    }

    #[test]
    fn socp_answers_satisfy_the_audited_constraint() {
        let (nominal, _plant, clf, gp) = trained_pendulum_gp(40, 3);
        let cfg = ControllerConfig::symmetric(0.5, 8.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let x = dvector![rng.random_range(-0.8..0.8), rng.random_range(-1.0..1.0)];
            let dec = gp_clf_socp(&nominal, &clf, &gp, &cfg, &x);
            assert_eq!(dec.status, StepStatus::Ok);
            let lhs = socp_constraint_value(&nominal, &clf, &gp, &cfg, &x, &dec.u).unwrap();
            assert!(lhs - dec.slack <= 1e-6, "audit violation: {:.3e}", lhs - dec.slack);
        }
    }

    #[test]
    fn socp_objective_is_monotone_in_beta() {
        let (nominal, _plant, clf, gp) = trained_pendulum_gp(40, 5);
        let mut cfg = ControllerConfig::symmetric(0.5, 8.0, 1).unwrap();
        let x = dvector![0.6, -0.4];
        let mut last = -f64::INFINITY;
        for beta in [0.0, 0.5, 1.0, 2.0, 4.0] {
            cfg.beta = beta;
            let dec = gp_clf_socp(&nominal, &clf, &gp, &cfg, &x);
            assert_eq!(dec.status, StepStatus::Ok);
            let obj = dec.u.norm_squared() + cfg.slack_penalty * dec.slack * dec.slack;
            assert!(obj >= last - 1e-6, "objective dropped to {obj} at beta {beta}");
            last = obj;
        }
    }

    #[test]
    fn socp_inputs_stay_inside_the_box_exactly() {
        // Tight box and fast decay rate force saturation on part of the
        // state space; the returned inputs must still be exact members.
        let (nominal, _plant, clf, gp) = trained_pendulum_gp(30, 9);
        let cfg = ControllerConfig::symmetric(3.0, 2.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut saturated = 0;
        for _ in 0..50 {
            let x = dvector![rng.random_range(-1.2..1.2), rng.random_range(-1.5..1.5)];
            let dec = gp_clf_socp(&nominal, &clf, &gp, &cfg, &x);
            assert!(cfg.contains(&dec.u));
            if (dec.u[0].abs() - 2.0).abs() < 1e-9 {
                saturated += 1;
            }
        }
        assert!(saturated > 0, "expected at least one saturated decision");
    }

    #[test]
    fn socp_matches_brute_force_on_random_states() {
        let (nominal, _plant, clf, gp) = trained_pendulum_gp(40, 21);
        let cfg = ControllerConfig::symmetric(0.5, 4.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let x = dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.2..1.2)];
            let dec = gp_clf_socp(&nominal, &clf, &gp, &cfg, &x);
            assert_eq!(dec.status, StepStatus::Ok);

            // For fixed u the optimal slack is the positive part of the
            // constraint left-hand side, so brute force only scans u.
            let post = gp.posterior_adp(&x).unwrap();
            let (lf, lg) = clf.lie_derivatives(&nominal, &x);
            let v = clf.value(&x);
            let eval = |u: f64| {
                let y = dvector![1.0, u];
                let lhs =
                    lf + lg[0] * u + post.mean(&y) + cfg.beta * post.std(&y) + cfg.lambda * v;
                u * u + cfg.slack_penalty * lhs.max(0.0).powi(2)
            };
            let obj_socp = eval(dec.u[0]);

            let mut best = (f64::INFINITY, 0.0f64);
            for k in 0..=8000 {
                let u = -4.0 + 8.0 * k as f64 / 8000.0;
                let o = eval(u);
                if o < best.0 {
                    best = (o, u);
                }
            }
            let lo = (best.1 - 2e-3).max(-4.0);
            let hi = (best.1 + 2e-3).min(4.0);
            for k in 0..=4000 {
                let u = lo + (hi - lo) * k as f64 / 4000.0;
                let o = eval(u);
                if o < best.0 {
                    best = (o, u);
                }
            }
            let tol = 1e-4 * (1.0 + best.0);
            assert!(
                (obj_socp - best.0).abs() <= tol,
                "socp {obj_socp} vs brute {best:?} at x = {x}"
            );
        }
    }

    #[test]
    fn socp_with_dense_data_tracks_the_plant_qp() {
        let nominal = pendulum();
        let plant = DriftShift { inner: &nominal, shift: dvector![0.0, 1.5] };
        let clf = pendulum_clf();
        let mut data = TrainingSet::empty(2, 2, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let x = dvector![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let u = dvector![rng.random_range(-8.0..8.0)];
            let z = vdot_mismatch(&clf, &plant, &nominal, &x, &u);
            data.push(&x, &dvector![1.0, u[0]], z).unwrap();
        }
        let gp = GpModel::fit(AdpKernel::homogeneous(2, 1.0, 1.5, 2).unwrap(), data).unwrap();
        let cfg = ControllerConfig::symmetric(1.0, 8.0, 1).unwrap();
        for _ in 0..10 {
            let x = dvector![rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
            let socp = gp_clf_socp(&nominal, &clf, &gp, &cfg, &x);
            let oracle = clf_qp(&plant, &clf, &cfg, &x);
            assert_eq!(socp.status, StepStatus::Ok);
            assert_abs_diff_eq!(socp.u[0], oracle.u[0], epsilon = 1e-2);
        }
    }

    #[test]
    fn baseline_with_dense_data_approaches_plant_qp_when_only_f_differs() {
        let nominal = pendulum();
        let plant = DriftShift { inner: &nominal, shift: dvector![0.0, 1.5] };
        let clf = pendulum_clf();
        // Input-free mismatch, so state-only labels capture it exactly.
        let mut data = TrainingSet::empty(2, 1, 1e-3).unwrap();
        let zero_u = dvector![0.0];
        for i in 0..12 {
            for j in 0..12 {
                let x = dvector![-1.0 + 2.0 * i as f64 / 11.0, -1.0 + 2.0 * j as f64 / 11.0];
                let z = vdot_mismatch(&clf, &plant, &nominal, &x, &zero_u);
                data.push(&x, &dvector![1.0], z).unwrap();
            }
        }
        let gp = GpModel::fit(AdpKernel::homogeneous(1, 1.0, 1.5, 2).unwrap(), data).unwrap();
        let mut cfg = ControllerConfig::symmetric(1.0, 8.0, 1).unwrap();
        cfg.beta = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..10 {
            let x = dvector![rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
            let base = gp_clf_qp_baseline(&nominal, &clf, &gp, &cfg, &x);
            let oracle = clf_qp(&plant, &clf, &cfg, &x);
            assert_eq!(base.status, StepStatus::Ok);
            assert_abs_diff_eq!(base.u[0], oracle.u[0], epsilon = 1e-2);
        }
    }

    #[test]
    fn config_rejects_bad_parameters() {
        assert!(ControllerConfig::symmetric(0.0, 1.0, 1).is_err());
        assert!(ControllerConfig::symmetric(-1.0, 1.0, 1).is_err());
        assert!(ControllerConfig::new(1.0, dvector![0.5], dvector![1.0]).is_err());

        let mut cfg = ControllerConfig::symmetric(1.0, 1.0, 1).unwrap();
        cfg.slack_penalty = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ControllerConfig::symmetric(1.0, 1.0, 1).unwrap();
        cfg.beta = -0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ControllerConfig::symmetric(1.0, 1.0, 1).unwrap();
        cfg.fallback = dvector![2.0];
        assert!(cfg.validate().is_err());
    }
}
