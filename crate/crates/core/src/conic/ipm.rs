//! Homogeneous self-dual interior-point method for the standard cone program
//!
//! ```text
//! minimize    c^T x
//! subject to  G x + s = h,  s in K,
//!             A x = b,
//! ```
//!
//! with `K` a product of a nonnegative orthant and second-order cones. The
//! embedding adds homogenizing variables `(tau, kappa)` so that infeasibility
//! comes out as a certificate instead of divergence. Each iteration computes
//! Nesterov-Todd scaled Mehrotra predictor-corrector directions from one LU
//! factorization of the dense KKT matrix
//!
//! ```text
//! [ 0   A^T  G^T ]
//! [ A   0    0   ]
//! [ G   0   -W^2 ]
//! ```
//!
//! solved three times (tau column, affine, combined). Problems here are tiny
//! (tens of rows), so dense factorization per iteration is the robust choice.

use nalgebra::{DMatrix, DVector};

use super::cones::{self, ConeDims, NtScaling};

#[derive(Debug, Clone)]
pub(crate) struct StandardForm {
    pub c: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub dims: ConeDims,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum IpmStatus {
    Optimal,
    PrimalInfeasible,
    /// Certified unbounded objective (dual infeasible).
    DualInfeasible,
    MaxIters,
    NumericalFailure,
}

/// Full primal-dual point; the slack and dual blocks are read by the
/// certificate tests and kept for debugging dumps.
#[derive(Debug, Clone)]
#[allow(dead_code)]
pub(crate) struct IpmOutcome {
    pub x: DVector<f64>,
    pub s: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    pub status: IpmStatus,
    pub iterations: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    pub gap: f64,
}

/// Damping of the step to the cone boundary.
const STEP: f64 = 0.99;

pub(crate) fn solve_standard(form: &StandardForm, tol: f64, max_iters: usize) -> IpmOutcome {
    let n = form.c.len();
    let p = form.a.nrows();
    let m = form.dims.total();
    debug_assert_eq!(form.g.nrows(), m);
    debug_assert_eq!(form.g.ncols(), n);
    debug_assert_eq!(form.h.len(), m);
    debug_assert_eq!(form.a.ncols(), n);
    debug_assert_eq!(form.b.len(), p);

    let e = cones::identity(&form.dims);
    let fail = |iterations: usize| IpmOutcome {
        x: DVector::zeros(n),
        s: DVector::zeros(m),
        z: DVector::zeros(m),
        y: DVector::zeros(p),
        status: IpmStatus::NumericalFailure,
        iterations,
        primal_res: f64::INFINITY,
        dual_res: f64::INFINITY,
        gap: f64::INFINITY,
    };

    // Initial point: least-squares primal/dual solves with W = I, shifted
    // into the cone interior, tau = kappa = 1.
    let kkt_init = assemble_kkt(form, &DMatrix::identity(m, m));
    let Some(init_lu) = KktSolver::new(kkt_init) else {
        return fail(0);
    };
    let Some((x0, _, z0)) = init_lu.solve(form, &DVector::zeros(n), &form.b, &form.h) else {
        return fail(0);
    };
    let mut s = -&z0;
    let shift = cones::min_eig(&s, &form.dims);
    if -shift >= -1e-8 * s.norm().max(1.0) {
        s += (1.0 - shift) * &e;
    }
    let mut x = x0;
    let Some((_, y0, z1)) = init_lu.solve(form, &(-&form.c), &DVector::zeros(p), &DVector::zeros(m))
    else {
        return fail(0);
    };
    let mut z = z1;
    let shift = cones::min_eig(&z, &form.dims);
    if -shift >= -1e-8 * z.norm().max(1.0) {
        z += (1.0 - shift) * &e;
    }
    let mut y = y0;
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let norm_b = form.b.norm().max(1.0);
    let norm_h = form.h.norm().max(1.0);
    let norm_c = form.c.norm().max(1.0);
    let rank = form.dims.rank() as f64;

    let mut best: Option<(f64, IpmOutcome)> = None;

    for iter in 0..=max_iters {
        // Residuals of the homogeneous equations.
        let rx = form.a.transpose() * &y + form.g.transpose() * &z + &form.c * tau;
        let ry = &form.a * &x - &form.b * tau;
        let rz = &form.g * &x + &s - &form.h * tau;
        let rtau = form.c.dot(&x) + form.b.dot(&y) + form.h.dot(&z) + kappa;

        // Convergence metrics on the de-homogenized iterate.
        let pcost = form.c.dot(&x) / tau;
        let dcost = -(form.b.dot(&y) + form.h.dot(&z)) / tau;
        // rx / tau is exactly A^T(y/tau) + G^T(z/tau) + c.
        let pres = (ry.norm() / norm_b).max(rz.norm() / norm_h) / tau;
        let dres = rx.norm() / (tau * norm_c);
        let gap = s.dot(&z) / (tau * tau);
        let outcome = |status, iterations| IpmOutcome {
            x: &x / tau,
            s: &s / tau,
            z: &z / tau,
            y: &y / tau,
            status,
            iterations,
            primal_res: pres,
            dual_res: dres,
            gap,
        };

        if pres <= tol && dres <= tol && gap <= tol * (1.0 + pcost.abs().min(dcost.abs())) {
            return outcome(IpmStatus::Optimal, iter);
        }
        // Residual-ratio infeasibility certificates.
        let hzby = form.h.dot(&z) + form.b.dot(&y);
        if hzby < 0.0 {
            let hres = (form.a.transpose() * &y + form.g.transpose() * &z).norm();
            if hres / (norm_c * -hzby) <= tol {
                let scale = -hzby;
                return IpmOutcome {
                    x: DVector::zeros(n),
                    s: DVector::zeros(m),
                    z: &z / scale,
                    y: &y / scale,
                    status: IpmStatus::PrimalInfeasible,
                    iterations: iter,
                    primal_res: pres,
                    dual_res: dres,
                    gap,
                };
            }
        }
        let cx = form.c.dot(&x);
        if cx < 0.0 {
            let hres = ((&form.a * &x).norm() / norm_b).max((&form.g * &x + &s).norm() / norm_h);
            if hres / -cx <= tol {
                let mut out = outcome(IpmStatus::DualInfeasible, iter);
                out.x = &x / -cx;
                return out;
            }
        }
        let score = pres.max(dres).max(gap / (1.0 + pcost.abs()));
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, outcome(IpmStatus::MaxIters, iter)));
        }
        if iter == max_iters {
            return best.map(|(_, o)| o).unwrap_or_else(|| fail(iter));
        }

        let Some(nt) = NtScaling::new(&s, &z, &form.dims) else {
            return best_or(best, fail(iter));
        };
        let lambda = nt.lambda().clone();
        let mu = (s.dot(&z) + tau * kappa) / (rank + 1.0);

        let kkt = assemble_kkt(form, &nt.w_squared());
        let Some(solver) = KktSolver::new(kkt) else {
            return best_or(best, fail(iter));
        };
        // tau-column system, shared by both directions.
        let Some((x2, y2, z2)) = solver.solve(form, &(-&form.c), &form.b, &form.h) else {
            return best_or(best, fail(iter));
        };
        let denom = form.c.dot(&x2) + form.b.dot(&y2) + form.h.dot(&z2) - kappa / tau;

        let direction = |rhs_x: &DVector<f64>,
                             rhs_y: &DVector<f64>,
                             rhs_z: &DVector<f64>,
                             rhs_tau: f64,
                             rhs_s: &DVector<f64>,
                             rhs_kappa: f64|
         -> Option<Direction> {
            let lam_inv_rs = cones::jordan_solve(&lambda, rhs_s, &form.dims)?;
            let tmp = rhs_z - nt.apply(&lam_inv_rs);
            let (x1, y1, z1) = solver.solve(form, rhs_x, rhs_y, &tmp)?;
            let num =
                rhs_tau - rhs_kappa / tau - (form.c.dot(&x1) + form.b.dot(&y1) + form.h.dot(&z1));
            if denom.abs() < 1e-300 {
                return None;
            }
            let dtau = num / denom;
            let dx = &x1 + dtau * &x2;
            let dy = &y1 + dtau * &y2;
            let dz = &z1 + dtau * &z2;
            let ds = nt.apply(&(lam_inv_rs - nt.apply(&dz)));
            let dkappa = (rhs_kappa - kappa * dtau) / tau;
            Some(Direction { dx, dy, dz, ds, dtau, dkappa })
        };

        // Mehrotra predictor: pure Newton step toward complementarity.
        let neg_ll = -cones::jordan_prod(&lambda, &lambda, &form.dims);
        let Some(aff) = direction(&(-&rx), &(-&ry), &(-&rz), -rtau, &neg_ll, -tau * kappa) else {
            return best_or(best, fail(iter));
        };
        let alpha_aff = step_length(&s, &z, tau, kappa, &aff, &form.dims).min(1.0);
        let gap_aff = (&s + alpha_aff * &aff.ds).dot(&(&z + alpha_aff * &aff.dz))
            + (tau + alpha_aff * aff.dtau) * (kappa + alpha_aff * aff.dkappa);
        let total = s.dot(&z) + tau * kappa;
        let sigma = (gap_aff / total).clamp(0.0, 1.0).powi(3);

        // Corrector: recenters and compensates the second-order term.
        let gamma = cones::jordan_prod(&nt.apply_inv(&aff.ds), &nt.apply(&aff.dz), &form.dims);
        let rhs_s = &neg_ll - &gamma + sigma * mu * &e;
        let rhs_kappa = -tau * kappa - aff.dtau * aff.dkappa + sigma * mu;
        let eta = 1.0 - sigma;
        let Some(dir) = direction(
            &(-eta * &rx),
            &(-eta * &ry),
            &(-eta * &rz),
            -eta * rtau,
            &rhs_s,
            rhs_kappa,
        ) else {
            return best_or(best, fail(iter));
        };
        let alpha = (STEP * step_length(&s, &z, tau, kappa, &dir, &form.dims)).min(1.0);
        if !alpha.is_finite() || alpha <= 0.0 {
            return best_or(best, fail(iter));
        }
        x += alpha * &dir.dx;
        y += alpha * &dir.dy;
        z += alpha * &dir.dz;
        s += alpha * &dir.ds;
        tau += alpha * dir.dtau;
        kappa += alpha * dir.dkappa;
        if !(tau > 0.0 && kappa > 0.0) || !tau.is_finite() {
            return best_or(best, fail(iter));
        }
    }
    unreachable!("loop returns on iter == max_iters");
}

struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    dz: DVector<f64>,
    ds: DVector<f64>,
    dtau: f64,
    dkappa: f64,
}

fn best_or(best: Option<(f64, IpmOutcome)>, fallback: IpmOutcome) -> IpmOutcome {
    match best {
        Some((_, mut o)) => {
            o.status = IpmStatus::NumericalFailure;
            o
        }
        None => fallback,
    }
}

/// Largest step keeping `(s, z, tau, kappa)` in the cone interior closure.
fn step_length(
    s: &DVector<f64>,
    z: &DVector<f64>,
    tau: f64,
    kappa: f64,
    dir: &Direction,
    dims: &ConeDims,
) -> f64 {
    let mut alpha = cones::max_step_dir(s, &dir.ds, dims);
    alpha = alpha.min(cones::max_step_dir(z, &dir.dz, dims));
    if dir.dtau < 0.0 {
        alpha = alpha.min(-tau / dir.dtau);
    }
    if dir.dkappa < 0.0 {
        alpha = alpha.min(-kappa / dir.dkappa);
    }
    alpha
}

fn assemble_kkt(form: &StandardForm, w_squared: &DMatrix<f64>) -> DMatrix<f64> {
    let n = form.c.len();
    let p = form.a.nrows();
    let m = form.dims.total();
    let size = n + p + m;
    let mut kkt = DMatrix::zeros(size, size);
    kkt.view_mut((0, n), (n, p)).copy_from(&form.a.transpose());
    kkt.view_mut((0, n + p), (n, m)).copy_from(&form.g.transpose());
    kkt.view_mut((n, 0), (p, n)).copy_from(&form.a);
    kkt.view_mut((n + p, 0), (m, n)).copy_from(&form.g);
    kkt.view_mut((n + p, n + p), (m, m)).copy_from(&(-w_squared));
    kkt
}

/// LU of the KKT matrix plus one round of iterative refinement per solve.
struct KktSolver {
    kkt: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl KktSolver {
    fn new(kkt: DMatrix<f64>) -> Option<Self> {
        let lu = kkt.clone().lu();
        // A singular KKT matrix shows up as a failed solve later; LU itself
        // does not signal rank deficiency, so probe with a trivial solve.
        let probe = lu.solve(&DVector::from_element(kkt.nrows(), 1.0))?;
        if !probe.iter().all(|v| v.is_finite()) {
            return None;
        }
        Some(Self { kkt, lu })
    }

    fn solve(
        &self,
        form: &StandardForm,
        rx: &DVector<f64>,
        ry: &DVector<f64>,
        rz: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let n = form.c.len();
        let p = form.a.nrows();
        let m = form.dims.total();
        let mut rhs = DVector::zeros(n + p + m);
        rhs.rows_mut(0, n).copy_from(rx);
        rhs.rows_mut(n, p).copy_from(ry);
        rhs.rows_mut(n + p, m).copy_from(rz);
        let mut sol = self.lu.solve(&rhs)?;
        let resid = &rhs - &self.kkt * &sol;
        if let Some(corr) = self.lu.solve(&resid) {
            sol += corr;
        }
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        Some((
            sol.rows(0, n).into_owned(),
            sol.rows(n, p).into_owned(),
            sol.rows(n + p, m).into_owned(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn no_eq(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    }

    #[test]
    fn linear_program_box() {
        // min -x1 - x2 s.t. 0 <= x <= 1: optimum (1, 1).
        let (a, b) = no_eq(2);
        let form = StandardForm {
            c: DVector::from_column_slice(&[-1.0, -1.0]),
            g: DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            h: DVector::from_column_slice(&[1.0, 1.0, 0.0, 0.0]),
            a,
            b,
            dims: ConeDims { lin: 4, socs: vec![] },
        };
        let out = solve_standard(&form, 1e-8, 50);
        assert_eq!(out.status, IpmStatus::Optimal);
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-7);
        assert_relative_eq!(out.x[1], 1.0, epsilon = 1e-7);
        assert!(out.gap <= 1e-7);
    }

    #[test]
    fn norm_bound_with_equalities() {
        // min t s.t. ||(w1, w2)|| <= t, w = (3, 4): t = 5.
        let form = StandardForm {
            c: DVector::from_column_slice(&[0.0, 0.0, 1.0]),
            g: DMatrix::from_row_slice(
                3,
                3,
                &[0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0],
            ),
            h: DVector::zeros(3),
            a: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            b: DVector::from_column_slice(&[3.0, 4.0]),
            dims: ConeDims { lin: 0, socs: vec![3] },
        };
        let out = solve_standard(&form, 1e-8, 50);
        assert_eq!(out.status, IpmStatus::Optimal);
        assert_relative_eq!(out.x[2], 5.0, epsilon = 1e-6);
        assert_relative_eq!(out.x[0], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn certifies_primal_infeasibility() {
        // ||w|| <= -1 is empty.
        let (a, b) = no_eq(1);
        let form = StandardForm {
            c: DVector::from_column_slice(&[0.0]),
            g: DMatrix::from_row_slice(2, 1, &[0.0, -1.0]),
            h: DVector::from_column_slice(&[-1.0, 0.0]),
            a,
            b,
            dims: ConeDims { lin: 0, socs: vec![2] },
        };
        let out = solve_standard(&form, 1e-8, 50);
        assert_eq!(out.status, IpmStatus::PrimalInfeasible);
        // Certificate: z in K*, G^T z = 0, h^T z < 0.
        let zres = (form.g.transpose() * &out.z).norm();
        assert!(zres <= 1e-6);
        assert!(form.h.dot(&out.z) < 0.0);
    }

    #[test]
    fn certifies_unboundedness() {
        // min x with only x <= 1: unbounded below.
        let (a, b) = no_eq(1);
        let form = StandardForm {
            c: DVector::from_column_slice(&[1.0]),
            g: DMatrix::from_row_slice(1, 1, &[1.0]),
            h: DVector::from_column_slice(&[1.0]),
            a,
            b,
            dims: ConeDims { lin: 1, socs: vec![] },
        };
        let out = solve_standard(&form, 1e-8, 50);
        assert_eq!(out.status, IpmStatus::DualInfeasible);
    }

    #[test]
    fn iteration_counts_are_deterministic() {
        let (a, b) = no_eq(2);
        let form = StandardForm {
            c: DVector::from_column_slice(&[1.0, 0.3]),
            g: DMatrix::from_row_slice(3, 2, &[0.0, -1.0, -1.0, 0.0, -0.2, -1.0]),
            h: DVector::from_column_slice(&[0.5, 0.1, 0.3]),
            a,
            b,
            dims: ConeDims { lin: 1, socs: vec![2] },
        };
        let o1 = solve_standard(&form, 1e-8, 50);
        let o2 = solve_standard(&form, 1e-8, 50);
        assert_eq!(o1.iterations, o2.iterations);
        assert_eq!(o1.x, o2.x);
        assert_eq!(o1.status, IpmStatus::Optimal);
    }
}
