//! Quadratic control Lyapunov functions and sublevel-set geometry.
//!
//! `V(x) = x^T P x` with `P` symmetric positive definite. The controllers
//! consume `V` through its Lie derivatives along a control-affine model,
//!
//! ```text
//! Vdot(x, u) = LfV(x) + LgV(x) u,   LfV = (2 P x)^T f(x),  LgV = (2 P x)^T g(x),
//! ```
//!
//! and the exponential stabilizability condition
//! `inf_u LfV + LgV u + lambda V <= 0` over a bounded input box. `P` comes
//! from LQR weights via the Riccati equation on the model linearization, so
//! the same `V` serves both the nominal controller and the learned ones.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::dynamics::ControlAffineSystem;
use crate::riccati::{solve_care, RiccatiError};

#[derive(Debug, Error)]
pub enum ClfError {
    #[error("P must be symmetric positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: V is over {expected} states, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("sublevel sampling failed after {attempts} attempts")]
    SamplingExhausted { attempts: usize },
    #[error("level bounds must satisfy 0 <= lo < hi")]
    BadLevels,
}

#[derive(Debug, Clone)]
pub struct QuadraticClf {
    p: DMatrix<f64>,
    /// Diagonal of P^{-1}, cached for sublevel bounding boxes.
    p_inv_diag: DVector<f64>,
}

impl QuadraticClf {
    pub fn new(p: DMatrix<f64>) -> Result<Self, ClfError> {
        if p.nrows() != p.ncols() {
            return Err(ClfError::NotPositiveDefinite);
        }
        if (&p - p.transpose()).abs().max() > 1e-10 * p.abs().max().max(1.0) {
            return Err(ClfError::NotPositiveDefinite);
        }
        let chol = Cholesky::new(p.clone()).ok_or(ClfError::NotPositiveDefinite)?;
        let p_inv_diag = chol.inverse().diagonal();
        Ok(Self { p, p_inv_diag })
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn p_matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.p * x)[(0, 0)]
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * &self.p * x
    }

    /// `(LfV, LgV)` along the model at `x`; `LgV` has one entry per input.
    pub fn lie_derivatives(
        &self,
        sys: &dyn ControlAffineSystem,
        x: &DVector<f64>,
    ) -> (f64, DVector<f64>) {
        let grad = self.gradient(x);
        let lf = grad.dot(&sys.drift(x));
        let lg = sys.actuation(x).transpose() * grad;
        (lf, lg)
    }

    /// `Vdot(x, u)` along the model.
    pub fn vdot(&self, sys: &dyn ControlAffineSystem, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let (lf, lg) = self.lie_derivatives(sys, x);
        lf + lg.dot(u)
    }

    pub fn sublevel(&self, level: f64) -> SublevelSet<'_> {
        SublevelSet { clf: self, level }
    }
}

/// Closed-form Lyapunov-derivative mismatch between two models of the same
/// shape: `Delta(x, u) = Vdot_plant(x, u) - Vdot_nominal(x, u)`. This is the
/// quantity the GP learns from finite differences; simulation-side code uses
/// it for audits and oracles.
pub fn vdot_mismatch(
    clf: &QuadraticClf,
    plant: &dyn ControlAffineSystem,
    nominal: &dyn ControlAffineSystem,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    clf.vdot(plant, x, u) - clf.vdot(nominal, x, u)
}

/// `{x : V(x) <= level}`.
#[derive(Debug, Clone, Copy)]
pub struct SublevelSet<'a> {
    clf: &'a QuadraticClf,
    pub level: f64,
}

impl<'a> SublevelSet<'a> {
    pub fn new(clf: &'a QuadraticClf, level: f64) -> Self {
        Self { clf, level }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.clf.value(x) <= self.level
    }

    /// Tight axis-aligned bounding box of the ellipsoid:
    /// `max |x_i| = sqrt(level * (P^{-1})_{ii})`.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        (0..self.clf.dim())
            .map(|i| {
                let r = (self.level.max(0.0) * self.clf.p_inv_diag[i]).sqrt();
                (-r, r)
            })
            .collect()
    }

    /// Uniform sample by rejection from the bounding box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<DVector<f64>, ClfError> {
        self.sample_shell(0.0, rng)
    }

    /// Uniform sample of the shell `{lo < V(x) <= level}` (`lo = 0` gives the
    /// full sublevel set).
    pub fn sample_shell<R: Rng>(&self, lo: f64, rng: &mut R) -> Result<DVector<f64>, ClfError> {
        if !(lo >= 0.0 && lo < self.level) {
            return Err(ClfError::BadLevels);
        }
        let bounds = self.bounding_box();
        let attempts = 100_000;
        for _ in 0..attempts {
            let x = DVector::from_fn(self.clf.dim(), |i, _| {
                rng.random_range(bounds[i].0..=bounds[i].1)
            });
            let v = self.clf.value(&x);
            if v <= self.level && v > lo {
                return Ok(x);
            }
        }
        Err(ClfError::SamplingExhausted { attempts })
    }
}

/// Result of sampling-based verification of the exponential CLF condition.
#[derive(Debug, Clone)]
pub struct ExponentialCheck {
    pub ok: bool,
    /// Largest value of `inf_u Vdot + lambda V` over the samples; negative
    /// means the condition held everywhere with that margin.
    pub worst: f64,
}

/// Check `inf_{u in U} LfV + LgV u + lambda V <= 0` on the given sample
/// states. The box infimum is attained at a vertex:
/// `inf_u LgV u = sum_j min(LgV_j lo_j, LgV_j hi_j)`.
pub fn verify_exponential_condition(
    clf: &QuadraticClf,
    sys: &dyn ControlAffineSystem,
    lambda: f64,
    input_lo: &DVector<f64>,
    input_hi: &DVector<f64>,
    samples: &[DVector<f64>],
) -> ExponentialCheck {
    let mut worst = f64::NEG_INFINITY;
    for x in samples {
        let (lf, lg) = clf.lie_derivatives(sys, x);
        let mut inf_term = 0.0;
        for j in 0..lg.len() {
            inf_term += (lg[j] * input_lo[j]).min(lg[j] * input_hi[j]);
        }
        worst = worst.max(lf + inf_term + lambda * clf.value(x));
    }
    ExponentialCheck { ok: worst <= 0.0, worst }
}

/// LQR-based CLF for the model: linearize at the origin (central differences
/// for `A`, exact `g(0)` for `B`), solve the Riccati equation for the
/// weights, and use `V = x^T P x`.
pub fn clf_from_lqr(
    sys: &dyn ControlAffineSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<QuadraticClf, ClfError> {
    let n = sys.state_dim();
    let h = 1e-6;
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = DVector::zeros(n);
        let mut xm = DVector::zeros(n);
        xp[j] = h;
        xm[j] = -h;
        let df = (sys.drift(&xp) - sys.drift(&xm)) / (2.0 * h);
        a.column_mut(j).copy_from(&df);
    }
    let b = sys.actuation(&DVector::zeros(n));
    let sol = solve_care(&a, &b, q, r)?;
    QuadraticClf::new(sol.p)
}
