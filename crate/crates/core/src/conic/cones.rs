//! Product-cone arithmetic for the interior-point solver.
//!
//! The cone is `K = R+^l x Q^{q_1} x ... x Q^{q_k}`: a nonnegative orthant
//! followed by second-order (Lorentz) cones `Q^q = {(u0, u1) : ||u1|| <= u0}`.
//! Vectors over `K` are flat: orthant coordinates first, then each cone block
//! with its scalar head first. The Jordan-algebra operations and the
//! Nesterov-Todd scaling below are the standard closed forms; everything here
//! is exact linear algebra on tiny blocks, no iteration.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ConeDims {
    pub lin: usize,
    /// Full block lengths including the scalar head; every entry >= 1.
    pub socs: Vec<usize>,
}

impl ConeDims {
    pub fn total(&self) -> usize {
        self.lin + self.socs.iter().sum::<usize>()
    }

    /// One gap unit per orthant coordinate plus one per cone block:
    /// at a scaled point each block contributes `lambda^T lambda = s^T z`.
    pub fn rank(&self) -> usize {
        self.lin + self.socs.len()
    }

    /// `(offset, length)` of each second-order cone block.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.socs.iter().scan(self.lin, |off, &len| {
            let here = *off;
            *off += len;
            Some((here, len))
        })
    }
}

/// Cone identity `e`: ones on the orthant, `(1, 0, ...)` per block.
pub(crate) fn identity(dims: &ConeDims) -> DVector<f64> {
    let mut e = DVector::zeros(dims.total());
    for i in 0..dims.lin {
        e[i] = 1.0;
    }
    for (off, _) in dims.blocks() {
        e[off] = 1.0;
    }
    e
}

/// Smallest spectral value of `u`: `min u_i` over the orthant and
/// `u0 - ||u1||` per block. Nonnegative iff `u` is in the cone.
pub(crate) fn min_eig(u: &DVector<f64>, dims: &ConeDims) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..dims.lin {
        m = m.min(u[i]);
    }
    for (off, len) in dims.blocks() {
        m = m.min(u[off] - u.rows(off + 1, len - 1).norm());
    }
    m
}

/// Largest `alpha >= 0` with `u + alpha du` in the cone; `u` must be strictly
/// interior. `INFINITY` when the ray never leaves.
pub(crate) fn max_step_dir(u: &DVector<f64>, du: &DVector<f64>, dims: &ConeDims) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..dims.lin {
        if du[i] < 0.0 {
            alpha = alpha.min(-u[i] / du[i]);
        }
    }
    for (off, len) in dims.blocks() {
        let u0 = u[off];
        let d0 = du[off];
        let u1 = u.rows(off + 1, len - 1);
        let d1 = du.rows(off + 1, len - 1);
        // rho(t) = (u0 + t d0)^2 - ||u1 + t d1||^2 = a t^2 + 2 b t + c with
        // c > 0 at an interior point; the boundary is the first positive root.
        let a = d0 * d0 - d1.norm_squared();
        let b = u0 * d0 - u1.dot(&d1);
        let c = (u0 - u1.norm()) * (u0 + u1.norm());
        let root = smallest_positive_root(a, b, c);
        alpha = alpha.min(root);
    }
    alpha
}

/// First positive root of `a t^2 + 2 b t + c = 0` given `c > 0`; INFINITY if
/// the quadratic stays positive. Citardauq form avoids cancellation.
fn smallest_positive_root(a: f64, b: f64, c: f64) -> f64 {
    if a.abs() < 1e-300 {
        return if b < 0.0 { -c / (2.0 * b) } else { f64::INFINITY };
    }
    let disc = b * b - a * c;
    if disc < 0.0 {
        // a < 0 with c > 0 forces disc > 0, so no real roots means a > 0.
        return f64::INFINITY;
    }
    let sq = disc.sqrt();
    let q = -(b + b.signum() * sq);
    let mut best = f64::INFINITY;
    for r in [q / a, if q != 0.0 { c / q } else { f64::INFINITY }] {
        if r > 0.0 && r < best {
            best = r;
        }
    }
    best
}

/// Jordan product `u o v`: coordinate-wise on the orthant,
/// `(u^T v, u0 v1 + v0 u1)` per block.
pub(crate) fn jordan_prod(u: &DVector<f64>, v: &DVector<f64>, dims: &ConeDims) -> DVector<f64> {
    let mut out = DVector::zeros(dims.total());
    for i in 0..dims.lin {
        out[i] = u[i] * v[i];
    }
    for (off, len) in dims.blocks() {
        let ub = u.rows(off, len);
        let vb = v.rows(off, len);
        out[off] = ub.dot(&vb);
        for i in 1..len {
            out[off + i] = u[off] * v[off + i] + v[off] * u[off + i];
        }
    }
    out
}

/// Solve `l o x = r` for `x`; `None` when `l` is not strictly interior.
pub(crate) fn jordan_solve(
    l: &DVector<f64>,
    r: &DVector<f64>,
    dims: &ConeDims,
) -> Option<DVector<f64>> {
    let mut x = DVector::zeros(dims.total());
    for i in 0..dims.lin {
        if l[i] <= 0.0 {
            return None;
        }
        x[i] = r[i] / l[i];
    }
    for (off, len) in dims.blocks() {
        let l0 = l[off];
        let l1 = l.rows(off + 1, len - 1);
        let det = (l0 - l1.norm()) * (l0 + l1.norm());
        if l0 <= 0.0 || det <= 0.0 {
            return None;
        }
        // Arrow-matrix inverse: x0 = (l0 r0 - l1.r1)/det, x1 = (r1 - x0 l1)/l0.
        let r0 = r[off];
        let r1 = r.rows(off + 1, len - 1);
        let x0 = (l0 * r0 - l1.dot(&r1)) / det;
        x[off] = x0;
        for i in 1..len {
            x[off + i] = (r[off + i] - x0 * l[off + i]) / l0;
        }
    }
    Some(x)
}

/// Nesterov-Todd scaling point for a strictly interior pair `(s, z)`:
/// the symmetric `W` with `W z = W^{-1} s = lambda`.
#[derive(Debug, Clone)]
pub(crate) struct NtScaling {
    dims: ConeDims,
    /// Orthant: `w_i = sqrt(s_i / z_i)`.
    lin_w: DVector<f64>,
    soc: Vec<SocScaling>,
    lambda: DVector<f64>,
}

#[derive(Debug, Clone)]
struct SocScaling {
    eta: f64,
    /// Hyperbolic unit: `wbar0^2 - ||wbar1||^2 = 1`.
    wbar: DVector<f64>,
}

impl NtScaling {
    pub fn new(s: &DVector<f64>, z: &DVector<f64>, dims: &ConeDims) -> Option<Self> {
        let mut lin_w = DVector::zeros(dims.lin);
        for i in 0..dims.lin {
            if s[i] <= 0.0 || z[i] <= 0.0 {
                return None;
            }
            lin_w[i] = (s[i] / z[i]).sqrt();
        }
        let mut soc = Vec::with_capacity(dims.socs.len());
        for (off, len) in dims.blocks() {
            let s0 = s[off];
            let z0 = z[off];
            let s1 = s.rows(off + 1, len - 1);
            let z1 = z.rows(off + 1, len - 1);
            let ds = (s0 - s1.norm()) * (s0 + s1.norm());
            let dz = (z0 - z1.norm()) * (z0 + z1.norm());
            if s0 <= 0.0 || z0 <= 0.0 || ds <= 0.0 || dz <= 0.0 {
                return None;
            }
            let gs = ds.sqrt();
            let gz = dz.sqrt();
            let sbar = s.rows(off, len) / gs;
            let zbar = z.rows(off, len) / gz;
            let gamma = ((1.0 + sbar.dot(&zbar)) / 2.0).sqrt();
            // wbar = (sbar + J zbar) / (2 gamma), J = diag(1, -I).
            let mut wbar = DVector::zeros(len);
            wbar[0] = (sbar[0] + zbar[0]) / (2.0 * gamma);
            for i in 1..len {
                wbar[i] = (sbar[i] - zbar[i]) / (2.0 * gamma);
            }
            soc.push(SocScaling { eta: (gs / gz).sqrt(), wbar });
        }
        let mut nt = Self { dims: dims.clone(), lin_w, soc, lambda: DVector::zeros(dims.total()) };
        // W z and W^{-1} s agree analytically; averaging splits the rounding.
        nt.lambda = 0.5 * (nt.apply(z) + nt.apply_inv(s));
        Some(nt)
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    /// `W u`.
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        self.apply_impl(u, false)
    }

    /// `W^{-1} u` (equal to `W^{-T} u`; `W` is symmetric).
    pub fn apply_inv(&self, u: &DVector<f64>) -> DVector<f64> {
        self.apply_impl(u, true)
    }

    fn apply_impl(&self, u: &DVector<f64>, inverse: bool) -> DVector<f64> {
        let mut out = DVector::zeros(self.dims.total());
        for i in 0..self.dims.lin {
            out[i] = if inverse { u[i] / self.lin_w[i] } else { u[i] * self.lin_w[i] };
        }
        for ((off, len), sc) in self.dims.blocks().zip(&self.soc) {
            // Wbar u = (w0 u0 + w1.u1, u1 + (u0 + w1.u1/(1+w0)) w1); the
            // inverse negates w1 (Wbar^{-1} = J Wbar J) and uses 1/eta.
            let sign = if inverse { -1.0 } else { 1.0 };
            let scale = if inverse { 1.0 / sc.eta } else { sc.eta };
            let w0 = sc.wbar[0];
            let u0 = u[off];
            let dot = sc.wbar.rows(1, len - 1).dot(&u.rows(off + 1, len - 1));
            out[off] = scale * (w0 * u0 + sign * dot);
            let coef = sign * u0 + dot / (1.0 + w0);
            for i in 1..len {
                out[off + i] = scale * (u[off + i] + coef * sc.wbar[i]);
            }
        }
        out
    }

    /// Dense `W^2` for KKT assembly: `diag(w^2)` on the orthant and
    /// `eta^2 (2 wbar wbar^T - J)` per block.
    pub fn w_squared(&self) -> DMatrix<f64> {
        let m = self.dims.total();
        let mut out = DMatrix::zeros(m, m);
        for i in 0..self.dims.lin {
            out[(i, i)] = self.lin_w[i] * self.lin_w[i];
        }
        for ((off, len), sc) in self.dims.blocks().zip(&self.soc) {
            let e2 = sc.eta * sc.eta;
            for i in 0..len {
                for j in 0..len {
                    let jterm = if i != j {
                        0.0
                    } else if i == 0 {
                        -1.0
                    } else {
                        1.0
                    };
                    out[(off + i, off + j)] = e2 * (2.0 * sc.wbar[i] * sc.wbar[j] + jterm);
                }
            }
        }
        out
    }
}
