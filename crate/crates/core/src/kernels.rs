//! Covariance kernels.
//!
//! Two layers live here. [`SeKernel`] is a squared-exponential kernel with
//! per-dimension lengthscales,
//!
//! ```text
//! k(x, x') = sigma_f^2 * exp(-1/2 * sum_d ((x_d - x'_d) / l_d)^2)
//! ```
//!
//! [`AdpKernel`] composes `p` base kernels into the affine-dot-product
//! compound kernel over pairs `(x, y)` of a state and an output-mixing
//! vector,
//!
//! ```text
//! k_c((x, y), (x', y')) = y^T Diag(k_1(x,x'), ..., k_p(x,x')) y',
//! ```
//!
//! which is the covariance of `Delta(x, y) = sum_i y_i h_i(x)` when each
//! `h_i` is an independent GP with kernel `k_i`. For mismatch regression the
//! mixing vector is `y = [1, u^T]^T`, so `p = m + 1` for an `m`-input system.
//! The Gram matrix of the compound kernel is the Hadamard sum
//! `K_c = sum_i (y_i y_i^T) ∘ K_i`, a sum of Hadamard products of PSD
//! matrices, hence PSD.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("input dimension mismatch: kernel expects {expected}, point has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mixing vector has {got} entries, compound kernel has {expected} base kernels")]
    MixingMismatch { expected: usize, got: usize },
    #[error("hyperparameters must be finite and positive")]
    BadHyperparameters,
    #[error("compound kernel needs at least one base kernel")]
    NoBaseKernels,
    #[error("base kernels disagree on input dimension")]
    MixedInputDims,
    #[error("points matrix has {points} columns but mixing matrix has {mixes}")]
    ColumnMismatch { points: usize, mixes: usize },
}

/// Squared-exponential kernel with anisotropic lengthscales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeKernel {
    signal_variance: f64,
    lengthscales: DVector<f64>,
}

impl SeKernel {
    pub fn new(signal_variance: f64, lengthscales: DVector<f64>) -> Result<Self, KernelError> {
        let ok = signal_variance.is_finite()
            && signal_variance > 0.0
            && lengthscales.len() > 0
            && lengthscales.iter().all(|l| l.is_finite() && *l > 0.0);
        if !ok {
            return Err(KernelError::BadHyperparameters);
        }
        Ok(Self { signal_variance, lengthscales })
    }

    /// Same lengthscale in every input dimension.
    pub fn isotropic(signal_variance: f64, lengthscale: f64, dim: usize) -> Result<Self, KernelError> {
        Self::new(signal_variance, DVector::from_element(dim, lengthscale))
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn lengthscales(&self) -> &DVector<f64> {
        &self.lengthscales
    }

    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64, KernelError> {
        self.check_dim(x.len())?;
        self.check_dim(y.len())?;
        Ok(self.eval_unchecked(x.as_view(), y.as_view()))
    }

    fn check_dim(&self, got: usize) -> Result<(), KernelError> {
        if got != self.input_dim() {
            return Err(KernelError::DimensionMismatch { expected: self.input_dim(), got });
        }
        Ok(())
    }

    pub(crate) fn eval_unchecked(&self, x: DVectorView<f64>, y: DVectorView<f64>) -> f64 {
        let mut q = 0.0;
        for d in 0..x.len() {
            let r = (x[d] - y[d]) / self.lengthscales[d];
            q += r * r;
        }
        self.signal_variance * (-0.5 * q).exp()
    }

    /// Gram matrix of the points stored as columns of `xs` (`n x N`).
    pub fn gram(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>, KernelError> {
        self.check_dim(xs.nrows())?;
        let n = xs.ncols();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            k[(j, j)] = self.signal_variance;
            for l in 0..j {
                let v = self.eval_unchecked(xs.column(j), xs.column(l));
                k[(j, l)] = v;
                k[(l, j)] = v;
            }
        }
        Ok(k)
    }

    /// Row vector `[k(x, xs_1), ..., k(x, xs_N)]`.
    pub fn cross(&self, x: &DVector<f64>, xs: &DMatrix<f64>) -> Result<DVector<f64>, KernelError> {
        self.check_dim(x.len())?;
        self.check_dim(xs.nrows())?;
        let mut out = DVector::zeros(xs.ncols());
        for j in 0..xs.ncols() {
            out[j] = self.eval_unchecked(x.as_view(), xs.column(j));
        }
        Ok(out)
    }

    /// Number of trainable hyperparameters (log signal variance plus one log
    /// lengthscale per input dimension).
    pub fn param_count(&self) -> usize {
        1 + self.input_dim()
    }

    /// Hyperparameters as `[ln sigma_f^2, ln l_1, ..., ln l_n]`.
    pub fn log_params(&self) -> DVector<f64> {
        let mut p = DVector::zeros(self.param_count());
        p[0] = self.signal_variance.ln();
        for d in 0..self.input_dim() {
            p[d + 1] = self.lengthscales[d].ln();
        }
        p
    }

    pub fn from_log_params(params: DVectorView<f64>) -> Result<Self, KernelError> {
        if params.len() < 2 {
            return Err(KernelError::BadHyperparameters);
        }
        let sv = params[0].exp();
        let ls = DVector::from_fn(params.len() - 1, |d, _| params[d + 1].exp());
        Self::new(sv, ls)
    }
}

/// Affine-dot-product compound kernel built from `p` base kernels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdpKernel {
    bases: Vec<SeKernel>,
}

impl AdpKernel {
    pub fn new(bases: Vec<SeKernel>) -> Result<Self, KernelError> {
        let first = bases.first().ok_or(KernelError::NoBaseKernels)?;
        let dim = first.input_dim();
        if bases.iter().any(|b| b.input_dim() != dim) {
            return Err(KernelError::MixedInputDims);
        }
        Ok(Self { bases })
    }

    /// `p` identical-shape base kernels with shared initial hyperparameters.
    pub fn homogeneous(
        output_dim: usize,
        signal_variance: f64,
        lengthscale: f64,
        input_dim: usize,
    ) -> Result<Self, KernelError> {
        let base = SeKernel::isotropic(signal_variance, lengthscale, input_dim)?;
        Ok(Self { bases: vec![base; output_dim.max(1)] })
    }

    /// Number of base kernels `p` (the mixing-vector dimension).
    pub fn output_dim(&self) -> usize {
        self.bases.len()
    }

    pub fn input_dim(&self) -> usize {
        self.bases[0].input_dim()
    }

    pub fn bases(&self) -> &[SeKernel] {
        &self.bases
    }

    pub fn bases_mut(&mut self) -> &mut [SeKernel] {
        &mut self.bases
    }

    fn check_mix(&self, len: usize) -> Result<(), KernelError> {
        if len != self.output_dim() {
            return Err(KernelError::MixingMismatch { expected: self.output_dim(), got: len });
        }
        Ok(())
    }

    /// `k_c((x, y), (x', y')) = sum_i y_i y'_i k_i(x, x')`.
    pub fn eval(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        x2: &DVector<f64>,
        y2: &DVector<f64>,
    ) -> Result<f64, KernelError> {
        self.check_mix(y.len())?;
        self.check_mix(y2.len())?;
        let mut acc = 0.0;
        for (i, base) in self.bases.iter().enumerate() {
            acc += y[i] * y2[i] * base.eval(x, x2)?;
        }
        Ok(acc)
    }

    /// Gram matrix over columns of `xs` (`n x N`) paired with columns of
    /// `ys` (`p x N`), assembled as the Hadamard sum
    /// `K_c = sum_i (y_i y_i^T) ∘ K_i`.
    pub fn gram(&self, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DMatrix<f64>, KernelError> {
        self.check_mix(ys.nrows())?;
        if xs.ncols() != ys.ncols() {
            return Err(KernelError::ColumnMismatch { points: xs.ncols(), mixes: ys.ncols() });
        }
        let n = xs.ncols();
        let mut acc = DMatrix::zeros(n, n);
        for (i, base) in self.bases.iter().enumerate() {
            let ki = base.gram(xs)?;
            let yi = ys.row(i);
            for j in 0..n {
                for l in 0..n {
                    acc[(j, l)] += yi[j] * yi[l] * ki[(j, l)];
                }
            }
        }
        Ok(acc)
    }

    /// Cross-covariance block `K_*Y` (`p x N`) between a query state `x` and
    /// the training pairs: row `i` is `k_i(x, x_j) * y_{i,j}`.
    pub fn cross_y(
        &self,
        x: &DVector<f64>,
        xs: &DMatrix<f64>,
        ys: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, KernelError> {
        self.check_mix(ys.nrows())?;
        if xs.ncols() != ys.ncols() {
            return Err(KernelError::ColumnMismatch { points: xs.ncols(), mixes: ys.ncols() });
        }
        let mut out = DMatrix::zeros(self.output_dim(), xs.ncols());
        for (i, base) in self.bases.iter().enumerate() {
            let ki = base.cross(x, xs)?;
            for j in 0..xs.ncols() {
                out[(i, j)] = ki[j] * ys[(i, j)];
            }
        }
        Ok(out)
    }

    /// `Diag(k_1(x,x), ..., k_p(x,x))` entries, the prior covariance of the
    /// latent vector at a query state.
    pub fn prior_diag(&self, x: &DVector<f64>) -> Result<DVector<f64>, KernelError> {
        self.bases[0].check_dim(x.len())?;
        Ok(DVector::from_fn(self.output_dim(), |i, _| self.bases[i].signal_variance()))
    }

    pub fn param_count(&self) -> usize {
        self.bases.iter().map(|b| b.param_count()).sum()
    }

    /// Concatenated base-kernel log-hyperparameters.
    pub fn log_params(&self) -> DVector<f64> {
        let mut p = DVector::zeros(self.param_count());
        let mut at = 0;
        for base in &self.bases {
            p.rows_mut(at, base.param_count()).copy_from(&base.log_params());
            at += base.param_count();
        }
        p
    }

    pub fn set_log_params(&mut self, params: &DVector<f64>) -> Result<(), KernelError> {
        if params.len() != self.param_count() {
            return Err(KernelError::BadHyperparameters);
        }
        let mut at = 0;
        for base in &mut self.bases {
            let count = base.param_count();
            *base = SeKernel::from_log_params(params.rows(at, count))?;
            at += count;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    /// Brute-force Gram assembly straight from the kernel definition; the
    /// oracle for the Hadamard-sum path.
    fn gram_adp_bruteforce(kc: &AdpKernel, xs: &DMatrix<f64>, ys: &DMatrix<f64>) -> DMatrix<f64> {
        let n = xs.ncols();
        DMatrix::from_fn(n, n, |j, l| {
            kc.eval(
                &xs.column(j).into_owned(),
                &ys.column(j).into_owned(),
                &xs.column(l).into_owned(),
                &ys.column(l).into_owned(),
            )
            .unwrap()
        })
    }

    fn random_adp(rng: &mut ChaCha8Rng, p: usize, n_dim: usize) -> AdpKernel {
        let bases = (0..p)
            .map(|_| {
                let sv = rng.random_range(0.3..2.5);
                let ls = DVector::from_fn(n_dim, |_, _| rng.random_range(0.4..3.0));
                SeKernel::new(sv, ls).unwrap()
            })
            .collect();
        AdpKernel::new(bases).unwrap()
    }

    #[test]
    fn se_at_identical_points_is_signal_variance() {
        let k = SeKernel::new(1.7, v(&[0.3, 2.0])).unwrap();
        let x = v(&[0.4, -1.2]);
        assert_relative_eq!(k.eval(&x, &x).unwrap(), 1.7, max_relative = 1e-15);
    }

    #[test]
    fn se_unit_1d_matches_closed_form() {
        let k = SeKernel::isotropic(1.0, 1.0, 1).unwrap();
        let got = k.eval(&v(&[0.0]), &v(&[2.0])).unwrap();
        assert_relative_eq!(got, (-2.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(got, 0.1353352832366127, epsilon = 1e-12);
    }

    #[test]
    fn se_anisotropic_matches_closed_form() {
        let k = SeKernel::new(2.0, v(&[1.0, 0.5])).unwrap();
        // q = (1/1)^2 + (1/0.5)^2 = 5, k = 2 exp(-2.5)
        let got = k.eval(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(got, 2.0 * (-2.5f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn se_rejects_bad_hyperparameters() {
        assert!(SeKernel::isotropic(0.0, 1.0, 2).is_err());
        assert!(SeKernel::isotropic(1.0, -1.0, 2).is_err());
        assert!(SeKernel::isotropic(f64::NAN, 1.0, 2).is_err());
        assert!(SeKernel::new(1.0, DVector::zeros(0)).is_err());
    }

    #[test]
    fn se_rejects_dimension_mismatch() {
        let k = SeKernel::isotropic(1.0, 1.0, 2).unwrap();
        assert_eq!(
            k.eval(&v(&[0.0]), &v(&[0.0, 1.0])),
            Err(KernelError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn adp_hand_expanded_two_base_case() {
        // y = [1, 2], y' = [3, 4]: k_c = 3 k_1 + 8 k_2.
        let k1 = SeKernel::isotropic(1.0, 1.0, 2).unwrap();
        let k2 = SeKernel::isotropic(0.7, 2.0, 2).unwrap();
        let x = v(&[0.1, -0.4]);
        let x2 = v(&[1.0, 0.2]);
        let a = k1.eval(&x, &x2).unwrap();
        let b = k2.eval(&x, &x2).unwrap();
        let kc = AdpKernel::new(vec![k1, k2]).unwrap();
        let got = kc.eval(&x, &v(&[1.0, 2.0]), &x2, &v(&[3.0, 4.0])).unwrap();
        assert_relative_eq!(got, 3.0 * a + 8.0 * b, epsilon = 1e-15);
    }

    #[test]
    fn adp_with_unit_mixing_reduces_to_base_kernel() {
        let base = SeKernel::isotropic(1.3, 0.8, 3).unwrap();
        let kc = AdpKernel::new(vec![base.clone()]).unwrap();
        let x = v(&[0.0, 1.0, -2.0]);
        let x2 = v(&[0.5, 0.5, 0.5]);
        let one = v(&[1.0]);
        assert_relative_eq!(
            kc.eval(&x, &one, &x2, &one).unwrap(),
            base.eval(&x, &x2).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn adp_rejects_mixing_mismatch() {
        let kc = AdpKernel::homogeneous(2, 1.0, 1.0, 2).unwrap();
        let x = v(&[0.0, 0.0]);
        let err = kc.eval(&x, &v(&[1.0]), &x, &v(&[1.0, 2.0])).unwrap_err();
        assert_eq!(err, KernelError::MixingMismatch { expected: 2, got: 1 });
    }

    #[test]
    fn gram_hadamard_sum_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(p, n_dim, n) in &[(1usize, 2usize, 6usize), (2, 2, 10), (3, 4, 12)] {
            let kc = random_adp(&mut rng, p, n_dim);
            let xs = DMatrix::from_fn(n_dim, n, |_, _| rng.random_range(-2.0..2.0));
            let ys = DMatrix::from_fn(p, n, |_, _| rng.random_range(-3.0..3.0));
            let fast = kc.gram(&xs, &ys).unwrap();
            let slow = gram_adp_bruteforce(&kc, &xs, &ys);
            let err = (&fast - &slow).abs().max();
            assert!(err <= 1e-12, "gram mismatch {err}");
        }
    }

    #[test]
    fn gram_is_psd_up_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let p = rng.random_range(1..4usize);
            let n_dim = rng.random_range(1..4usize);
            let n = rng.random_range(2..16usize);
            let kc = random_adp(&mut rng, p, n_dim);
            let xs = DMatrix::from_fn(n_dim, n, |_, _| rng.random_range(-2.0..2.0));
            let ys = DMatrix::from_fn(p, n, |_, _| rng.random_range(-3.0..3.0));
            let k = kc.gram(&xs, &ys).unwrap();
            let trace = k.trace();
            let min_eig = k
                .symmetric_eigenvalues()
                .iter()
                .fold(f64::INFINITY, |a, &b| a.min(b));
            assert!(
                min_eig >= -1e-9 * (trace / n as f64).max(1.0),
                "min eig {min_eig} trace {trace}"
            );
        }
    }

    #[test]
    fn cross_y_rows_are_scaled_base_cross_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kc = random_adp(&mut rng, 3, 2);
        let xs = DMatrix::from_fn(2, 8, |_, _| rng.random_range(-1.0..1.0));
        let ys = DMatrix::from_fn(3, 8, |_, _| rng.random_range(-2.0..2.0));
        let x = v(&[0.3, -0.3]);
        let block = kc.cross_y(&x, &xs, &ys).unwrap();
        for i in 0..3 {
            let ki = kc.bases()[i].cross(&x, &xs).unwrap();
            for j in 0..8 {
                assert_relative_eq!(block[(i, j)], ki[j] * ys[(i, j)], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn log_param_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut kc = random_adp(&mut rng, 2, 3);
        let params = kc.log_params();
        let mut other = kc.clone();
        other.set_log_params(&(params.clone() * 0.0)).unwrap();
        assert_relative_eq!(other.bases()[0].signal_variance(), 1.0, epsilon = 1e-15);
        kc.set_log_params(&params).unwrap();
        assert_relative_eq!(
            (kc.log_params() - params).norm(),
            0.0,
            epsilon = 1e-14
        );
    }

    proptest! {
        #[test]
        fn adp_eval_is_symmetric(
            seed in 0u64..5_000,
            x0 in -3.0f64..3.0, x1 in -3.0f64..3.0,
            y0 in -2.0f64..2.0, y1 in -2.0f64..2.0,
            w0 in -2.0f64..2.0, w1 in -2.0f64..2.0,
            z0 in -2.0f64..2.0, z1 in -2.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kc = random_adp(&mut rng, 2, 2);
            let a = kc.eval(&v(&[x0, x1]), &v(&[w0, w1]), &v(&[y0, y1]), &v(&[z0, z1])).unwrap();
            let b = kc.eval(&v(&[y0, y1]), &v(&[z0, z1]), &v(&[x0, x1]), &v(&[w0, w1])).unwrap();
            prop_assert!((a - b).abs() <= 1e-13 * a.abs().max(1.0));
        }

        #[test]
        fn adp_eval_is_bounded_by_mixing_norms(
            seed in 0u64..5_000,
            x0 in -5.0f64..5.0, x1 in -5.0f64..5.0,
            y0 in -5.0f64..5.0, y1 in -5.0f64..5.0,
            w0 in -4.0f64..4.0, w1 in -4.0f64..4.0,
            z0 in -4.0f64..4.0, z1 in -4.0f64..4.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kc = random_adp(&mut rng, 2, 2);
            let val = kc.eval(&v(&[x0, x1]), &v(&[w0, w1]), &v(&[y0, y1]), &v(&[z0, z1])).unwrap();
            // |k_c| <= sum_i sigma_i^2 |w_i||z_i| since each |k_i| <= sigma_i^2.
            let bound: f64 = (0..2)
                .map(|i| kc.bases()[i].signal_variance() * [w0, w1][i].abs() * [z0, z1][i].abs())
                .sum();
            prop_assert!(val.abs() <= bound + 1e-12);
        }

        #[test]
        fn adp_eval_is_bilinear_in_mixing_vectors(
            seed in 0u64..5_000,
            a in -3.0f64..3.0, b in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kc = random_adp(&mut rng, 2, 2);
            let x = v(&[0.2, -0.7]);
            let x2 = v(&[-0.5, 0.4]);
            let y1 = v(&[1.0, -0.5]);
            let y2 = v(&[0.3, 2.0]);
            let z = v(&[-1.0, 0.8]);
            let lhs = kc.eval(&x, &(a * &y1 + b * &y2), &x2, &z).unwrap();
            let rhs = a * kc.eval(&x, &y1, &x2, &z).unwrap() + b * kc.eval(&x, &y2, &x2, &z).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }
}
