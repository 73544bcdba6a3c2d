//! Embedded dense SOCP/QP solver.
//!
//! Programs are stated over a decision vector `w`:
//!
//! ```text
//! minimize    c^T w
//! subject to  ||A_i w + b_i|| <= g_i^T w + h_i   (second-order cones)
//!             G w <= r                           (boxes and halfspaces)
//!             E w  = f                           (optional equalities)
//! ```
//!
//! `solve` lowers this to the standard cone form and runs the homogeneous
//! interior-point method in [`ipm`]; `solve_qp` minimizes a strictly convex
//! quadratic by epigraph reduction (`1/2 w^T H w + q^T w` equals
//! `1/2 ||L^T w + L^{-1} q||^2` up to a constant, with `H = L L^T`), and
//! `check_feasibility` runs the zero-objective program and returns a
//! certified witness. Every optimal answer is self-checked against its own
//! constraints before being reported.

mod cones;
mod ipm;

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use cones::ConeDims;
use ipm::{solve_standard, IpmStatus, StandardForm};

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("constraint dimensions do not match decision dimension {dim}")]
    DimensionMismatch { dim: usize },
    #[error("program has no constraints")]
    NoConstraints,
    #[error("quadratic objective must be positive definite")]
    NotPositiveDefinite,
}

/// `||A w + b|| <= g^T w + h`.
#[derive(Debug, Clone)]
pub struct SocConstraint {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DVector<f64>,
    pub h: f64,
}

impl SocConstraint {
    /// Signed violation at `w`; nonpositive when satisfied.
    pub fn violation(&self, w: &DVector<f64>) -> f64 {
        (&self.a * w + &self.b).norm() - self.g.dot(w) - self.h
    }
}

#[derive(Debug, Clone)]
pub struct ConicProgram {
    dim: usize,
    objective: DVector<f64>,
    socs: Vec<SocConstraint>,
    lin_g: Vec<DVector<f64>>,
    lin_r: Vec<f64>,
    eq_e: Vec<DVector<f64>>,
    eq_f: Vec<f64>,
}

impl ConicProgram {
    pub fn new(objective: DVector<f64>) -> Self {
        let dim = objective.len();
        Self {
            dim,
            objective,
            socs: Vec::new(),
            lin_g: Vec::new(),
            lin_r: Vec::new(),
            eq_e: Vec::new(),
            eq_f: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push_soc(&mut self, soc: SocConstraint) -> Result<(), ConicError> {
        if soc.a.ncols() != self.dim
            || soc.g.len() != self.dim
            || soc.a.nrows() != soc.b.len()
        {
            return Err(ConicError::DimensionMismatch { dim: self.dim });
        }
        self.socs.push(soc);
        Ok(())
    }

    /// Adds `g^T w <= r`.
    pub fn push_linear(&mut self, g: DVector<f64>, r: f64) -> Result<(), ConicError> {
        if g.len() != self.dim {
            return Err(ConicError::DimensionMismatch { dim: self.dim });
        }
        self.lin_g.push(g);
        self.lin_r.push(r);
        Ok(())
    }

    /// Adds `e^T w = f`.
    pub fn push_equality(&mut self, e: DVector<f64>, f: f64) -> Result<(), ConicError> {
        if e.len() != self.dim {
            return Err(ConicError::DimensionMismatch { dim: self.dim });
        }
        self.eq_e.push(e);
        self.eq_f.push(f);
        Ok(())
    }

    /// Worst constraint violation at `w` (equalities by absolute residual);
    /// nonpositive means feasible.
    pub fn max_violation(&self, w: &DVector<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for soc in &self.socs {
            worst = worst.max(soc.violation(w));
        }
        for (g, r) in self.lin_g.iter().zip(&self.lin_r) {
            worst = worst.max(g.dot(w) - r);
        }
        for (e, f) in self.eq_e.iter().zip(&self.eq_f) {
            worst = worst.max((e.dot(w) - f).abs());
        }
        worst
    }

    fn lower(&self) -> StandardForm {
        let n = self.dim;
        let lin = self.lin_g.len();
        let mut soc_dims = Vec::with_capacity(self.socs.len());
        let m = lin + self.socs.iter().map(|s| s.a.nrows() + 1).sum::<usize>();
        let mut g = DMatrix::zeros(m, n);
        let mut h = DVector::zeros(m);
        for (i, (row, r)) in self.lin_g.iter().zip(&self.lin_r).enumerate() {
            g.row_mut(i).copy_from(&row.transpose());
            h[i] = *r;
        }
        let mut off = lin;
        for soc in &self.socs {
            let rows = soc.a.nrows();
            soc_dims.push(rows + 1);
            // Slack (g^T w + h, A w + b) must land in the cone; a cone whose
            // norm argument is identically zero has no interior, so nudge it.
            g.row_mut(off).copy_from(&(-soc.g.transpose()));
            h[off] = soc.h;
            g.view_mut((off + 1, 0), (rows, n)).copy_from(&(-&soc.a));
            h.rows_mut(off + 1, rows).copy_from(&soc.b);
            if rows > 0 && soc.a.amax() == 0.0 && soc.b.amax() == 0.0 {
                h[off + 1] = 1e-12;
            }
            off += rows + 1;
        }
        let p = self.eq_e.len();
        let mut a = DMatrix::zeros(p, n);
        let mut b = DVector::zeros(p);
        for (i, (row, f)) in self.eq_e.iter().zip(&self.eq_f).enumerate() {
            a.row_mut(i).copy_from(&row.transpose());
            b[i] = *f;
        }
        StandardForm {
            c: self.objective.clone(),
            g,
            h,
            a,
            b,
            dims: ConeDims { lin, socs: soc_dims },
        }
    }

    fn validate(&self) -> Result<(), ConicError> {
        if self.dim == 0 || (self.socs.is_empty() && self.lin_g.is_empty()) {
            return Err(ConicError::NoConstraints);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIters,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub w: DVector<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub duality_gap: f64,
}

#[derive(Debug, Clone)]
pub enum Feasibility {
    Feasible(DVector<f64>),
    Infeasible,
    Unknown,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 50 }
    }
}

/// Violation ceiling for accepting an "optimal" answer.
const SELF_CHECK_TOL: f64 = 1e-7;

pub fn solve(prog: &ConicProgram, opts: &SolverOptions) -> Result<SolveResult, ConicError> {
    prog.validate()?;
    let mut form = prog.lower();
    // Solve with the objective scaled to unit norm: positive rescalings of c
    // then map to the identical iteration sequence, and the gap test becomes
    // scale-free. Residuals are mapped back to original units below.
    let scale = form.c.norm();
    if scale > 0.0 {
        form.c /= scale;
    }
    let out = solve_standard(&form, opts.tol, opts.max_iters);
    let status = match out.status {
        IpmStatus::Optimal => {
            if prog.max_violation(&out.x) <= SELF_CHECK_TOL {
                SolveStatus::Optimal
            } else {
                SolveStatus::NumericalFailure
            }
        }
        IpmStatus::PrimalInfeasible => SolveStatus::Infeasible,
        // Unbounded objectives never arise from the controller programs;
        // surfaced as a failure rather than widening the status set.
        IpmStatus::DualInfeasible => SolveStatus::NumericalFailure,
        IpmStatus::MaxIters => SolveStatus::MaxIters,
        IpmStatus::NumericalFailure => SolveStatus::NumericalFailure,
    };
    let denorm = if scale > 0.0 { scale } else { 1.0 };
    Ok(SolveResult {
        objective: prog.objective.dot(&out.x),
        w: out.x,
        status,
        iterations: out.iterations,
        primal_residual: out.primal_res,
        dual_residual: out.dual_res * denorm,
        duality_gap: out.gap * denorm,
    })
}

/// Minimizes `1/2 w^T H w + q^T w` subject to `G w <= r` (rows of `lin`).
/// The reported objective is the quadratic's value at the minimizer.
pub fn solve_qp(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    lin: &[(DVector<f64>, f64)],
    opts: &SolverOptions,
) -> Result<SolveResult, ConicError> {
    let d = h.nrows();
    if h.ncols() != d || q.len() != d {
        return Err(ConicError::DimensionMismatch { dim: d });
    }
    let chol = Cholesky::new(h.clone()).ok_or(ConicError::NotPositiveDefinite)?;
    let l = chol.l();
    // 1/2 w^T H w + q^T w = 1/2 ||L^T w + L^{-1} q||^2 - 1/2 q^T H^{-1} q.
    let l_inv_q = l.clone().solve_lower_triangular(q).ok_or(ConicError::NotPositiveDefinite)?;

    // Decision (w, t): minimize t subject to ||L^T w + L^{-1} q|| <= t.
    let mut c = DVector::zeros(d + 1);
    c[d] = 1.0;
    let mut prog = ConicProgram::new(c);
    let mut a = DMatrix::zeros(d, d + 1);
    a.view_mut((0, 0), (d, d)).copy_from(&l.transpose());
    let mut g = DVector::zeros(d + 1);
    g[d] = 1.0;
    prog.push_soc(SocConstraint { a, b: l_inv_q, g, h: 0.0 })?;
    for (row, r) in lin {
        if row.len() != d {
            return Err(ConicError::DimensionMismatch { dim: d });
        }
        let mut ext = DVector::zeros(d + 1);
        ext.rows_mut(0, d).copy_from(row);
        prog.push_linear(ext, *r)?;
    }
    let mut result = solve(&prog, opts)?;
    let w = result.w.rows(0, d).into_owned();
    result.objective = 0.5 * (h * &w).dot(&w) + q.dot(&w);
    if result.status == SolveStatus::Optimal {
        let viol = lin.iter().map(|(row, r)| row.dot(&w) - r).fold(f64::NEG_INFINITY, f64::max);
        if viol > SELF_CHECK_TOL {
            result.status = SolveStatus::NumericalFailure;
        }
    }
    result.w = w;
    Ok(result)
}

/// Decides whether the constraint set of `prog` is non-empty, ignoring its
/// objective. A `Feasible` verdict always carries a self-checked witness.
pub fn check_feasibility(
    prog: &ConicProgram,
    opts: &SolverOptions,
) -> Result<Feasibility, ConicError> {
    let mut probe = prog.clone();
    probe.objective = DVector::zeros(prog.dim);
    let result = solve(&probe, opts)?;
    Ok(match result.status {
        SolveStatus::Optimal if prog.max_violation(&result.w) <= SELF_CHECK_TOL => {
            Feasibility::Feasible(result.w)
        }
        SolveStatus::Optimal => Feasibility::Unknown,
        SolveStatus::Infeasible => Feasibility::Infeasible,
        SolveStatus::MaxIters | SolveStatus::NumericalFailure => Feasibility::Unknown,
    })
}

/// Plain-text dump of a program (matrix-market-flavored blocks), for offline
/// inspection of failed solves.
pub fn dump_program(prog: &ConicProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "%% conic program, dim {}", prog.dim);
    let write_vec = |out: &mut String, name: &str, v: &DVector<f64>| {
        let _ = writeln!(out, "% {name} array {} 1", v.len());
        for x in v.iter() {
            let _ = writeln!(out, "{x:.17e}");
        }
    };
    let write_mat = |out: &mut String, name: &str, m: &DMatrix<f64>| {
        let _ = writeln!(out, "% {name} array {} {}", m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let _ = writeln!(out, "{:.17e}", m[(i, j)]);
            }
        }
    };
    write_vec(&mut out, "objective", &prog.objective);
    for (k, soc) in prog.socs.iter().enumerate() {
        write_mat(&mut out, &format!("soc{k}.A"), &soc.a);
        write_vec(&mut out, &format!("soc{k}.b"), &soc.b);
        write_vec(&mut out, &format!("soc{k}.g"), &soc.g);
        let _ = writeln!(out, "% soc{k}.h scalar\n{:.17e}", soc.h);
    }
    for (k, (g, r)) in prog.lin_g.iter().zip(&prog.lin_r).enumerate() {
        write_vec(&mut out, &format!("lin{k}.g"), g);
        let _ = writeln!(out, "% lin{k}.r scalar\n{r:.17e}");
    }
    for (k, (e, f)) in prog.eq_e.iter().zip(&prog.eq_f).enumerate() {
        write_vec(&mut out, &format!("eq{k}.e"), e);
        let _ = writeln!(out, "% eq{k}.f scalar\n{f:.17e}");
    }
    out
}
