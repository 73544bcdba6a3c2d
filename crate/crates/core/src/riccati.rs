//! Continuous-time algebraic Riccati equation
//!
//! ```text
//! A^T P + P A - P B R^{-1} B^T P + Q = 0
//! ```
//!
//! solved through the matrix sign function of the Hamiltonian
//! `H = [A, -B R^{-1} B^T; -Q, -A^T]`. The sign iteration
//! `S <- (gamma S + gamma^{-1} S^{-1}) / 2` with determinant scaling
//! converges quadratically when `H` has no imaginary-axis eigenvalues; the
//! stable invariant subspace then satisfies `(S + I) [U1; U2] = 0`, and
//! `P = U2 U1^{-1}` is recovered from the overdetermined system
//! `[S12; S22 + I] P = -[S11 + I; S21]`. The residual and a closed-loop
//! Hurwitz check guard against non-stabilizable inputs.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RiccatiError {
    #[error("A must be square and agree with B, Q, R dimensions")]
    BadDimensions,
    #[error("R must be symmetric positive definite")]
    BadWeight,
    #[error("Q must be symmetric")]
    AsymmetricQ,
    #[error("matrix sign iteration did not converge")]
    NoConvergence,
    #[error("(A, B) appears not stabilizable: CARE residual {residual:.3e}")]
    NotStabilizable { residual: f64 },
}

#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    /// LQR gain `K = R^{-1} B^T P`; the optimal feedback is `u = -K x`.
    pub gain: DMatrix<f64>,
    /// Backward-error CARE residual: `||A^T P + P A - P S P + Q||` divided
    /// by the combined magnitude of the terms. Near-unstabilizable pairs can
    /// have `||P||` of 1e5 and more, where normalizing by `||Q||` alone would
    /// reject machine-precision solutions.
    pub residual: f64,
}

const RESIDUAL_TOL: f64 = 1e-8;

pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<CareSolution, RiccatiError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(RiccatiError::BadDimensions);
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(RiccatiError::BadDimensions);
    }
    if (q - q.transpose()).abs().max() > 1e-12 * q.abs().max().max(1.0) {
        return Err(RiccatiError::AsymmetricQ);
    }
    let r_chol = Cholesky::new(r.clone()).ok_or(RiccatiError::BadWeight)?;
    let rinv_bt = r_chol.solve(&b.transpose()); // R^{-1} B^T
    let s_mat = b * &rinv_bt; // B R^{-1} B^T

    let two_n = 2 * n;
    let mut h = DMatrix::zeros(two_n, two_n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&s_mat));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut s = h;
    let mut converged = false;
    for _ in 0..100 {
        let lu = s.clone().lu();
        let det = lu.determinant();
        if !det.is_finite() || det == 0.0 {
            return Err(RiccatiError::NoConvergence);
        }
        let sinv = lu.try_inverse().ok_or(RiccatiError::NoConvergence)?;
        let gamma = det.abs().powf(-1.0 / two_n as f64);
        let next = 0.5 * (gamma * &s + (1.0 / gamma) * sinv);
        let diff = (&next - &s).norm();
        let settled = diff <= 1e-13 * next.norm().max(1.0);
        s = next;
        if settled {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RiccatiError::NoConvergence);
    }

    let mut lhs = DMatrix::zeros(two_n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&s.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(s.view((n, n), (n, n)) + DMatrix::<f64>::identity(n, n)));
    let mut rhs = DMatrix::zeros(two_n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(s.view((0, 0), (n, n)) + DMatrix::<f64>::identity(n, n))));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-s.view((n, 0), (n, n))));

    let svd = lhs.svd(true, true);
    let mut p = svd.solve(&rhs, 1e-12).map_err(|_| RiccatiError::NoConvergence)?;
    // Round-off symmetrization; the exact solution is symmetric.
    p = 0.5 * (&p + p.transpose());

    // Newton (Kleinman) refinement. The sign iteration typically lands within
    // ~1e-7 of the solution; each step solves the closed-loop Lyapunov
    // equation  Acl^T P' + P' Acl = -(Q + P S P),  Acl = A - S P,  via
    // Kronecker vectorization (n is small here) and converges quadratically,
    // so a couple of steps reach machine precision.
    let care_res = |p: &DMatrix<f64>| (a.transpose() * p + p * a - p * &s_mat * p + q).norm();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut best = care_res(&p);
    for _ in 0..5 {
        if best <= 1e-14 * q.norm().max(1.0) {
            break;
        }
        let acl_t = (a - &s_mat * &p).transpose();
        let lyap_lhs = eye.kronecker(&acl_t) + acl_t.kronecker(&eye);
        let c = -(q + &p * &s_mat * &p);
        let cvec = DVector::from_column_slice(c.as_slice());
        let Some(sol) = lyap_lhs.lu().solve(&cvec) else { break };
        let mut p_next = DMatrix::from_column_slice(n, n, sol.as_slice());
        p_next = 0.5 * (&p_next + p_next.transpose());
        let res_next = care_res(&p_next);
        if res_next < best {
            best = res_next;
            p = p_next;
        } else {
            break;
        }
    }

    let res_mat = a.transpose() * &p + &p * a - &p * &s_mat * &p + q;
    let scale = q.norm().max(1.0) + 2.0 * (a.transpose() * &p).norm() + (&p * &s_mat * &p).norm();
    let residual = res_mat.norm() / scale;
    if !residual.is_finite() || residual > RESIDUAL_TOL {
        return Err(RiccatiError::NotStabilizable { residual });
    }
    let closed = a - &s_mat * &p;
    let hurwitz = closed.complex_eigenvalues().iter().all(|e| e.re < 0.0);
    let pd = p.clone().cholesky().is_some();
    if !hurwitz || !pd {
        return Err(RiccatiError::NotStabilizable { residual });
    }

    let gain = &rinv_bt * &p;
    Ok(CareSolution { p, gain, residual })
}
