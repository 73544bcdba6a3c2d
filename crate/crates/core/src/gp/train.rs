//! Hyperparameter training by marginal-likelihood ascent.
//!
//! The log marginal likelihood of the regularized model is
//!
//! ```text
//! L = -1/2 z^T alpha - sum_j ln L_jj - N/2 ln(2 pi),   alpha = (K + sigma_n^2 I)^{-1} z
//! ```
//!
//! and its gradient w.r.t. a kernel hyperparameter `t` is the standard
//! identity `dL/dt = 1/2 tr((alpha alpha^T - K^{-1}) dK/dt)`. Parameters are
//! the per-base-kernel logs `[ln sf^2, ln l_1, ..., ln l_n]`, so for the
//! compound Gram `K_c = sum_i (y_i y_i^T) ∘ K_i`:
//!
//! ```text
//! dK_c / d ln sf_i^2 = (y_i y_i^T) ∘ K_i
//! dK_c / d ln l_id   = (y_i y_i^T) ∘ K_i ∘ R_id,   R_id[j,l] = ((x_dj - x_dl)/l_id)^2
//! ```
//!
//! Ascent is plain backtracking gradient steps on the log parameters from
//! several restarts (the warm start plus seeded perturbations); restarts run
//! in parallel and are merged by (likelihood, restart index) so the outcome
//! does not depend on scheduling.

use nalgebra::{Cholesky, DVector};
#[cfg(test)]
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{regularized_gram, GpError, TrainingSet};
use crate::kernels::AdpKernel;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Number of ascent starts: the warm start plus `restarts - 1` seeded
    /// perturbations of it.
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop when the gradient sup-norm falls below this.
    pub grad_tol: f64,
    /// Standard deviation of the log-space perturbation for restarts.
    pub perturb_std: f64,
    /// Log parameters are clamped to `[-bound, bound]`.
    pub param_bound: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iters: 80,
            grad_tol: 1e-4,
            perturb_std: 0.6,
            param_bound: 9.0,
            seed: 0,
        }
    }
}

/// Log marginal likelihood of the data under the kernel (with the same noise
/// and jitter regularization used by model fitting).
pub fn log_marginal_likelihood(kernel: &AdpKernel, data: &TrainingSet) -> Result<f64, GpError> {
    let n = data.len();
    if n == 0 {
        return Ok(0.0);
    }
    let k = regularized_gram(kernel, data)?;
    let chol = Cholesky::new(k.clone())
        .ok_or_else(|| GpError::Factorization { pivot: super::smallest_pivot(&k) })?;
    Ok(lml_from_chol(&chol, data.zs(), n))
}

fn lml_from_chol(chol: &Cholesky<f64, nalgebra::Dyn>, zs: &DVector<f64>, n: usize) -> f64 {
    let alpha = chol.solve(zs);
    let log_det_half: f64 = (0..n).map(|j| chol.l_dirty()[(j, j)].ln()).sum();
    -0.5 * zs.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Likelihood and gradient w.r.t. the kernel's log parameters.
pub fn lml_and_grad(
    kernel: &AdpKernel,
    data: &TrainingSet,
) -> Result<(f64, DVector<f64>), GpError> {
    let n = data.len();
    let n_params = kernel.param_count();
    if n == 0 {
        return Ok((0.0, DVector::zeros(n_params)));
    }
    let k = regularized_gram(kernel, data)?;
    let chol = Cholesky::new(k.clone())
        .ok_or_else(|| GpError::Factorization { pivot: super::smallest_pivot(&k) })?;
    let alpha = chol.solve(data.zs());
    let lml = lml_from_chol(&chol, data.zs(), n);

    // A = alpha alpha^T - K^{-1}; gradient = 1/2 sum(A ∘ dK).
    let mut a = chol.inverse();
    a.neg_mut();
    for j in 0..n {
        for l in 0..n {
            a[(j, l)] += alpha[j] * alpha[l];
        }
    }

    let xs = data.xs();
    let ys = data.ys();
    let mut grad = DVector::zeros(n_params);
    let mut at = 0;
    for (i, base) in kernel.bases().iter().enumerate() {
        let ki = base.gram(xs)?;
        let ls = base.lengthscales();
        let dim = base.input_dim();
        let mut g_sv = 0.0;
        let mut g_ls = vec![0.0f64; dim];
        for j in 0..n {
            for l in 0..n {
                let weighted = a[(j, l)] * ys[(i, j)] * ys[(i, l)] * ki[(j, l)];
                g_sv += weighted;
                for d in 0..dim {
                    let r = (xs[(d, j)] - xs[(d, l)]) / ls[d];
                    g_ls[d] += weighted * r * r;
                }
            }
        }
        grad[at] = 0.5 * g_sv;
        for d in 0..dim {
            grad[at + 1 + d] = 0.5 * g_ls[d];
        }
        at += base.param_count();
    }
    Ok((lml, grad))
}

/// Multi-start ascent from `kernel` as the warm start. Returns the best
/// kernel found and its log marginal likelihood.
pub fn train_hyperparams(
    kernel: &AdpKernel,
    data: &TrainingSet,
    opts: &TrainOptions,
) -> Result<(AdpKernel, f64), GpError> {
    if data.is_empty() {
        return Ok((kernel.clone(), 0.0));
    }
    let warm = kernel.log_params();
    let starts: Vec<DVector<f64>> = (0..opts.restarts.max(1))
        .map(|r| {
            if r == 0 {
                warm.clone()
            } else {
                // Independent stream per restart keeps the start list stable
                // under any later change to the number of restarts.
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(r as u64));
                let mut theta = warm.clone();
                for v in theta.iter_mut() {
                    *v += gaussian(&mut rng) * opts.perturb_std;
                }
                clamp(&mut theta, opts.param_bound);
                theta
            }
        })
        .collect();

    let mut results: Vec<Option<(f64, DVector<f64>)>> = starts
        .par_iter()
        .map(|theta0| ascend(kernel, data, theta0, opts).ok())
        .collect();

    // Strict comparison: earlier restarts win ties, independent of how the
    // parallel evaluations were scheduled.
    let mut best_idx = None;
    let mut best_lml = f64::NEG_INFINITY;
    for (i, res) in results.iter().enumerate() {
        if let Some((lml, _)) = res {
            if best_idx.is_none() || *lml > best_lml {
                best_idx = Some(i);
                best_lml = *lml;
            }
        }
    }
    let idx = best_idx.ok_or(GpError::Optimization)?;
    let (lml, theta) = results[idx].take().unwrap();
    let mut out = kernel.clone();
    out.set_log_params(&theta)?;
    Ok((out, lml))
}

fn ascend(
    kernel: &AdpKernel,
    data: &TrainingSet,
    theta0: &DVector<f64>,
    opts: &TrainOptions,
) -> Result<(f64, DVector<f64>), GpError> {
    let mut scratch = kernel.clone();
    let eval = |theta: &DVector<f64>, scratch: &mut AdpKernel| -> Option<(f64, DVector<f64>)> {
        scratch.set_log_params(theta).ok()?;
        lml_and_grad(scratch, data).ok()
    };
    let mut theta = theta0.clone();
    let (mut lml, mut grad) = eval(&theta, &mut scratch).ok_or(GpError::Optimization)?;
    let mut step = 0.1;
    for _ in 0..opts.max_iters {
        if grad.amax() < opts.grad_tol {
            break;
        }
        // Normalized ascent direction bounds the log-space move per iteration.
        let dir = &grad / grad.norm();
        let mut advanced = false;
        while step >= 1e-12 {
            let mut cand = &theta + step * &dir;
            clamp(&mut cand, opts.param_bound);
            if let Some((cand_lml, cand_grad)) = eval(&cand, &mut scratch) {
                if cand_lml > lml {
                    theta = cand;
                    lml = cand_lml;
                    grad = cand_grad;
                    advanced = true;
                    step = (step * 2.0).min(1.0);
                    break;
                }
            }
            step *= 0.5;
        }
        if !advanced {
            break;
        }
    }
    Ok((lml, theta))
}

fn clamp(theta: &mut DVector<f64>, bound: f64) {
    for v in theta.iter_mut() {
        *v = v.clamp(-bound, bound);
    }
}

/// Standard normal via Box-Muller; two uniform draws per sample keeps the
/// stream layout independent of rand's distribution internals.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
