//! GP regression on Lyapunov-derivative mismatch data.
//!
//! Labels `z_j` are noisy evaluations of `Delta(x, u) = y^T h(x)` with
//! `y = [1, u^T]^T`, so the model is a GP with the affine-dot-product
//! compound kernel over pairs `(x_j, y_j)`. Conditioning on the data gives,
//! at a query state `x`, a posterior over the latent vector `h(x)` whose
//! mean is affine and whose variance is quadratic in the query mixing
//! vector:
//!
//! ```text
//! mu(x, y*)      = b*^T y*,        b*  = K_*Y (K_c + sigma_n^2 I)^{-1} z
//! sigma^2(x, y*) = y*^T C* y*,     C*  = Diag(k_i(x,x)) - K_*Y (K_c + sigma_n^2 I)^{-1} K_*Y^T
//! ```
//!
//! `C*` is PSD up to round-off, so it factors as `C* = L^T L`; splitting `L`
//! by columns turns the posterior standard deviation into the conic form
//! `sigma(x, u) = ||M(x) u + n(x)||` consumed by the SOCP controller.

mod train;

pub use train::{log_marginal_likelihood, train_hyperparams, TrainOptions};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{AdpKernel, KernelError};

#[derive(Debug, Error)]
pub enum GpError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("training set shapes disagree: xs {xs} cols, ys {ys} cols, zs {zs} entries")]
    ShapeMismatch { xs: usize, ys: usize, zs: usize },
    #[error("noise standard deviation must be finite and positive, got {0}")]
    BadNoise(f64),
    #[error("kernel matrix factorization failed, smallest pivot {pivot:.3e}")]
    Factorization { pivot: f64 },
    #[error("posterior covariance indefinite beyond repair tolerance, min eigenvalue {min_eig:.3e}")]
    IndefinitePosterior { min_eig: f64 },
    #[error("training data contain non-finite values")]
    NonFinite,
    #[error("hyperparameter optimization produced no usable candidate")]
    Optimization,
}

/// Mismatch measurements: states `xs` (`n x N`), mixing vectors `ys`
/// (`p x N`, each column `[1, u^T]^T`), labels `zs`, and the observation
/// noise level used for regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSet {
    xs: DMatrix<f64>,
    ys: DMatrix<f64>,
    zs: DVector<f64>,
    noise_std: f64,
}

impl TrainingSet {
    pub fn new(
        xs: DMatrix<f64>,
        ys: DMatrix<f64>,
        zs: DVector<f64>,
        noise_std: f64,
    ) -> Result<Self, GpError> {
        if xs.ncols() != ys.ncols() || xs.ncols() != zs.len() {
            return Err(GpError::ShapeMismatch { xs: xs.ncols(), ys: ys.ncols(), zs: zs.len() });
        }
        if !(noise_std.is_finite() && noise_std > 0.0) {
            return Err(GpError::BadNoise(noise_std));
        }
        let finite = xs.iter().chain(ys.iter()).chain(zs.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(GpError::NonFinite);
        }
        Ok(Self { xs, ys, zs, noise_std })
    }

    /// Empty set for an `n`-state, `p`-output model.
    pub fn empty(state_dim: usize, output_dim: usize, noise_std: f64) -> Result<Self, GpError> {
        Self::new(
            DMatrix::zeros(state_dim, 0),
            DMatrix::zeros(output_dim, 0),
            DVector::zeros(0),
            noise_std,
        )
    }

    pub fn push(&mut self, x: &DVector<f64>, y: &DVector<f64>, z: f64) -> Result<(), GpError> {
        if x.len() != self.xs.nrows() || y.len() != self.ys.nrows() {
            return Err(GpError::ShapeMismatch { xs: x.len(), ys: y.len(), zs: 1 });
        }
        if !(x.iter().chain(y.iter()).all(|v| v.is_finite()) && z.is_finite()) {
            return Err(GpError::NonFinite);
        }
        let n = self.len();
        self.xs = self.xs.clone().insert_column(n, 0.0);
        self.xs.column_mut(n).copy_from(x);
        self.ys = self.ys.clone().insert_column(n, 0.0);
        self.ys.column_mut(n).copy_from(y);
        self.zs = self.zs.clone().insert_row(n, z);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.xs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.xs.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.ys.nrows()
    }

    pub fn xs(&self) -> &DMatrix<f64> {
        &self.xs
    }

    pub fn ys(&self) -> &DMatrix<f64> {
        &self.ys
    }

    pub fn zs(&self) -> &DVector<f64> {
        &self.zs
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Numerical rank of the mixing-vector Gram `Y Y^T`; the data excite all
    /// `p` latent directions only when this equals `p`.
    pub fn excitation_rank(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        let g = &self.ys * self.ys.transpose();
        let eigs = g.symmetric_eigenvalues();
        let max = eigs.iter().fold(0.0f64, |a, &b| a.max(b));
        if max <= 0.0 {
            return 0;
        }
        eigs.iter().filter(|&&e| e > 1e-10 * max).count()
    }
}

/// Posterior over the latent vector `h(x)` at one query state: mean
/// `b^T y*`, variance `y*^T c y*`.
#[derive(Debug, Clone)]
pub struct StructuredPosterior {
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
}

impl StructuredPosterior {
    pub fn mean(&self, y_star: &DVector<f64>) -> f64 {
        self.b.dot(y_star)
    }

    pub fn variance(&self, y_star: &DVector<f64>) -> f64 {
        (y_star.transpose() * &self.c * y_star)[(0, 0)].max(0.0)
    }

    pub fn std(&self, y_star: &DVector<f64>) -> f64 {
        self.variance(y_star).sqrt()
    }
}

/// Conic factorization of a structured posterior with mixing convention
/// `y* = [1, u^T]^T`: `sigma(x, u) = ||input_cols * u + constant||`.
#[derive(Debug, Clone)]
pub struct SocpFactors {
    pub constant: DVector<f64>,
    pub input_cols: DMatrix<f64>,
}

impl SocpFactors {
    pub fn std(&self, u: &DVector<f64>) -> f64 {
        (&self.input_cols * u + &self.constant).norm()
    }
}

/// Trained GP mismatch model: kernel, data, and the cached factorization of
/// `K_c + sigma_n^2 I` (plus a relative jitter `1e-10 tr(K_c)/N`).
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: AdpKernel,
    data: TrainingSet,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
}

pub(crate) const JITTER_REL: f64 = 1e-10;

/// Regularized kernel matrix `K_c + (sigma_n^2 + jitter) I`.
pub(crate) fn regularized_gram(
    kernel: &AdpKernel,
    data: &TrainingSet,
) -> Result<DMatrix<f64>, GpError> {
    let mut k = kernel.gram(data.xs(), data.ys())?;
    let n = data.len();
    if n > 0 {
        let shift = data.noise_std().powi(2) + JITTER_REL * k.trace() / n as f64;
        for j in 0..n {
            k[(j, j)] += shift;
        }
    }
    Ok(k)
}

/// Smallest pivot of an attempted Cholesky factorization, for diagnostics
/// after nalgebra's factorization rejects the matrix.
fn smallest_pivot(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    let mut smallest = f64::INFINITY;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        smallest = smallest.min(d);
        if !(d > 0.0) || !d.is_finite() {
            return if d.is_finite() { d } else { f64::NEG_INFINITY };
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    smallest
}

impl GpModel {
    /// Condition the kernel on the data. `N = 0` yields the prior model.
    pub fn fit(kernel: AdpKernel, data: TrainingSet) -> Result<Self, GpError> {
        if kernel.output_dim() != data.output_dim() && !data.is_empty() {
            return Err(GpError::ShapeMismatch {
                xs: data.len(),
                ys: data.output_dim(),
                zs: kernel.output_dim(),
            });
        }
        if data.is_empty() {
            return Ok(Self { kernel, data, chol: None, alpha: DVector::zeros(0) });
        }
        if kernel.input_dim() != data.state_dim() {
            return Err(KernelError::DimensionMismatch {
                expected: kernel.input_dim(),
                got: data.state_dim(),
            }
            .into());
        }
        let k = regularized_gram(&kernel, &data)?;
        let chol = Cholesky::new(k.clone())
            .ok_or_else(|| GpError::Factorization { pivot: smallest_pivot(&k) })?;
        let alpha = chol.solve(data.zs());
        Ok(Self { kernel, data, chol: Some(chol), alpha })
    }

    pub fn kernel(&self) -> &AdpKernel {
        &self.kernel
    }

    pub fn data(&self) -> &TrainingSet {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Structured posterior at a query state: `O(p N^2)` given the cached
    /// factorization, no dependence on the query input.
    pub fn posterior_adp(&self, x: &DVector<f64>) -> Result<StructuredPosterior, GpError> {
        let p = self.kernel.output_dim();
        let prior = self.kernel.prior_diag(x)?;
        let Some(chol) = &self.chol else {
            return Ok(StructuredPosterior { b: DVector::zeros(p), c: DMatrix::from_diagonal(&prior) });
        };
        let cross = self.kernel.cross_y(x, self.data.xs(), self.data.ys())?;
        let b = &cross * &self.alpha;
        let solved = chol.solve(&cross.transpose());
        let mut c = DMatrix::from_diagonal(&prior) - &cross * solved;
        // Symmetrize away the round-off skew before anything downstream
        // eigendecomposes it.
        for i in 0..p {
            for j in 0..i {
                let s = 0.5 * (c[(i, j)] + c[(j, i)]);
                c[(i, j)] = s;
                c[(j, i)] = s;
            }
        }
        Ok(StructuredPosterior { b, c })
    }

    /// Generic GP posterior treating `(x, y*)` as a monolithic input point.
    /// Same math as [`Self::posterior_adp`] through a different route; kept
    /// as the reference implementation.
    pub fn posterior_generic(
        &self,
        x: &DVector<f64>,
        y_star: &DVector<f64>,
    ) -> Result<(f64, f64), GpError> {
        let prior = self.kernel.eval(x, y_star, x, y_star)?;
        let Some(chol) = &self.chol else {
            return Ok((0.0, prior.max(0.0)));
        };
        let n = self.data.len();
        let mut kv = DVector::zeros(n);
        for j in 0..n {
            kv[j] = self.kernel.eval(
                x,
                y_star,
                &self.data.xs().column(j).into_owned(),
                &self.data.ys().column(j).into_owned(),
            )?;
        }
        let mean = kv.dot(&self.alpha);
        let var = prior - kv.dot(&chol.solve(&kv));
        Ok((mean, var.max(0.0)))
    }

    /// Factor the posterior covariance as `C* = L^T L` (eigendecomposition
    /// with negative round-off eigenvalues clamped to zero) and split `L` by
    /// the `[1, u^T]` mixing convention.
    pub fn socp_factors(&self, posterior: &StructuredPosterior) -> Result<SocpFactors, GpError> {
        let p = posterior.c.nrows();
        let eig = posterior.c.clone().symmetric_eigen();
        let scale = posterior.c.trace().abs().max(1.0);
        let mut min_eig = f64::INFINITY;
        for &e in eig.eigenvalues.iter() {
            min_eig = min_eig.min(e);
        }
        if min_eig < -1e-8 * scale {
            return Err(GpError::IndefinitePosterior { min_eig });
        }
        // L = Lambda^{1/2} Q^T so that L^T L = Q Lambda Q^T = C*.
        let mut l = eig.eigenvectors.transpose();
        for i in 0..p {
            let s = eig.eigenvalues[i].max(0.0).sqrt();
            l.row_mut(i).scale_mut(s);
        }
        let constant = l.column(0).into_owned();
        let input_cols = l.columns(1, p - 1).into_owned();
        Ok(SocpFactors { constant, input_cols })
    }

    /// Posterior mean and variance of the mismatch at `(x, u)` through the
    /// structured path.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(f64, f64), GpError> {
        let mut y = DVector::zeros(u.len() + 1);
        y[0] = 1.0;
        y.rows_mut(1, u.len()).copy_from(u);
        let post = self.posterior_adp(x)?;
        Ok((post.mean(&y), post.variance(&y)))
    }

    /// Scale factor for the UCB interval per the config.
    pub fn ucb_beta(&self, cfg: &UcbConfig) -> f64 {
        if let Some(b) = cfg.beta_override {
            return b;
        }
        let gamma = match cfg.gamma {
            GammaMode::Constant(g) => g,
            GammaMode::GreedyApprox => self.greedy_information_gain(),
        };
        cfg.beta_formula(self.len(), gamma)
    }

    /// Greedy lower approximation of the information gain of the training
    /// set: repeatedly select the point of maximal conditional variance and
    /// accumulate `1/2 ln(1 + sigma_j^2 / sigma_n^2)`.
    pub fn greedy_information_gain(&self) -> f64 {
        let n = self.data.len();
        if n == 0 {
            return 0.0;
        }
        let k = match self.kernel.gram(self.data.xs(), self.data.ys()) {
            Ok(k) => k,
            Err(_) => return 0.0,
        };
        let sn2 = self.data.noise_std().powi(2);
        let mut res_var: Vec<f64> = (0..n).map(|j| k[(j, j)]).collect();
        let mut picked = vec![false; n];
        // Rows of the growing conditional factor, one per selected point.
        let mut factor: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut gain = 0.0;
        for _ in 0..n {
            let mut best = usize::MAX;
            let mut best_var = 0.0;
            for j in 0..n {
                if !picked[j] && res_var[j] > best_var {
                    best_var = res_var[j];
                    best = j;
                }
            }
            if best == usize::MAX || best_var <= 0.0 {
                break;
            }
            gain += 0.5 * (1.0 + best_var / sn2).ln();
            picked[best] = true;
            let mut w = k.column(best).into_owned();
            for row in &factor {
                let scale = row[best];
                w.axpy(-scale, row, 1.0);
            }
            let denom = (best_var + sn2).sqrt();
            w /= denom;
            for j in 0..n {
                if !picked[j] {
                    res_var[j] = (res_var[j] - w[j] * w[j]).max(0.0);
                }
            }
            factor.push(w);
        }
        gain
    }
}

/// How to obtain the information-gain term in the UCB scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum GammaMode {
    Constant(f64),
    GreedyApprox,
}

/// Configuration of the high-probability uncertainty bound
/// `|mu - Delta| <= beta sigma`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UcbConfig {
    /// Failure probability of the bound.
    pub delta: f64,
    /// RKHS norm bound `B` on the mismatch.
    pub rkhs_bound: f64,
    pub gamma: GammaMode,
    /// Practical constant scale; bypasses the formula when set.
    pub beta_override: Option<f64>,
}

impl Default for UcbConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            rkhs_bound: 1.0,
            gamma: GammaMode::Constant(1.0),
            beta_override: Some(2.0),
        }
    }
}

impl UcbConfig {
    /// `beta = (2 B^2 + 300 gamma ln^3((N+1)/delta))^(1/2)`.
    pub fn beta_formula(&self, n: usize, gamma: f64) -> f64 {
        let b = self.rkhs_bound;
        let lg = (((n + 1) as f64) / self.delta).ln();
        (2.0 * b * b + 300.0 * gamma * lg.powi(3)).sqrt()
    }
}
