//! Exponential covariance kernel over latent coordinates.
//!
//! The kernel measures similarity between latent positions as
//! `theta1 * exp(-||x - x'|| / theta2^2)` — note the *non-squared* Euclidean
//! distance, which makes sample paths rough, and the inverse-square length
//! scale. Hyperparameters are stored in log space so optimizers can move
//! freely without positivity constraints.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Default diagonal loading applied before factorization.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Largest diagonal loading the escalation ladder will try.
const JITTER_CEILING: f64 = 1e-2;

/// Supported kernel families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    /// `theta1 * exp(-theta2^{-2} * ||x - x'||)`.
    Exponential,
}

/// A kernel with its hyperparameters, observation noise and jitter floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    log_theta1: f64,
    log_theta2: f64,
    noise_var: f64,
    jitter: f64,
}

impl KernelSpec {
    /// Exponential kernel with amplitude `theta1` and length scale `theta2`.
    ///
    /// Noise defaults to zero and jitter to [`DEFAULT_JITTER`]; use
    /// [`with_noise_var`](Self::with_noise_var) and
    /// [`with_jitter`](Self::with_jitter) to adjust.
    pub fn exponential(theta1: f64, theta2: f64) -> Result<Self> {
        if !(theta1 > 0.0) || !theta1.is_finite() {
            return Err(Error::Input(format!(
                "kernel amplitude must be positive and finite, got {theta1}"
            )));
        }
        if !(theta2 > 0.0) || !theta2.is_finite() {
            return Err(Error::Input(format!(
                "kernel length scale must be positive and finite, got {theta2}"
            )));
        }
        Ok(Self {
            family: KernelFamily::Exponential,
            log_theta1: theta1.ln(),
            log_theta2: theta2.ln(),
            noise_var: 0.0,
            jitter: DEFAULT_JITTER,
        })
    }

    /// Same kernel, built directly from log-space hyperparameters.
    pub fn exponential_from_log(log_theta1: f64, log_theta2: f64) -> Self {
        Self {
            family: KernelFamily::Exponential,
            log_theta1,
            log_theta2,
            noise_var: 0.0,
            jitter: DEFAULT_JITTER,
        }
    }

    /// Replaces the observation-noise variance (must be nonnegative).
    pub fn with_noise_var(mut self, noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::Input(format!(
                "noise variance must be nonnegative and finite, got {noise_var}"
            )));
        }
        self.noise_var = noise_var;
        Ok(self)
    }

    /// Replaces the starting jitter (must be nonnegative).
    pub fn with_jitter(mut self, jitter: f64) -> Result<Self> {
        if !(jitter >= 0.0) || !jitter.is_finite() {
            return Err(Error::Input(format!(
                "jitter must be nonnegative and finite, got {jitter}"
            )));
        }
        self.jitter = jitter;
        Ok(self)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn theta1(&self) -> f64 {
        self.log_theta1.exp()
    }

    pub fn theta2(&self) -> f64 {
        self.log_theta2.exp()
    }

    pub fn log_theta1(&self) -> f64 {
        self.log_theta1
    }

    pub fn log_theta2(&self) -> f64 {
        self.log_theta2
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Kernel value between two latent points.
    ///
    /// Errors if the points have different (or zero) dimension.
    pub fn eval(&self, x: &DVector<f64>, x2: &DVector<f64>) -> Result<f64> {
        if x.len() != x2.len() || x.is_empty() {
            return Err(Error::Input(format!(
                "kernel arguments must share a nonzero dimension, got {} and {}",
                x.len(),
                x2.len()
            )));
        }
        Ok(self.eval_unchecked(x.as_slice(), x2.as_slice()))
    }

    #[inline]
    fn eval_unchecked(&self, x: &[f64], x2: &[f64]) -> f64 {
        let mut d2 = 0.0;
        for (a, b) in x.iter().zip(x2) {
            let diff = a - b;
            d2 += diff * diff;
        }
        let inv_len_sq = (-2.0 * self.log_theta2).exp();
        self.theta1() * (-inv_len_sq * d2.sqrt()).exp()
    }

    /// Dense kernel matrix over the rows of `latents` (an `N x Q` layout),
    /// factorized once.
    ///
    /// With `include_noise` the observation-noise variance is added to the
    /// diagonal along with the jitter; otherwise only the jitter is added.
    /// If Cholesky fails, the jitter is escalated tenfold per attempt up to
    /// `1e-2` before giving up with [`Error::CholeskyFailed`].
    pub fn matrix(&self, latents: &DMatrix<f64>, include_noise: bool) -> Result<KernelMatrix> {
        let n = latents.nrows();
        if n == 0 || latents.ncols() == 0 {
            return Err(Error::Input(
                "kernel matrix needs at least one point of nonzero dimension".into(),
            ));
        }
        if latents.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("latent coordinates must be finite".into()));
        }

        let mut base = DMatrix::zeros(n, n);
        let theta1 = self.theta1();
        let inv_len_sq = (-2.0 * self.log_theta2).exp();
        for i in 0..n {
            base[(i, i)] = theta1;
            for j in 0..i {
                let mut d2 = 0.0;
                for q in 0..latents.ncols() {
                    let diff = latents[(i, q)] - latents[(j, q)];
                    d2 += diff * diff;
                }
                let v = theta1 * (-inv_len_sq * d2.sqrt()).exp();
                base[(i, j)] = v;
                base[(j, i)] = v;
            }
        }
        if include_noise {
            for i in 0..n {
                base[(i, i)] += self.noise_var;
            }
        }

        let (chol, jitter_used, values) = factor_with_ladder(base, self.jitter)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(KernelMatrix {
            values,
            chol,
            log_det,
            jitter_used,
            noise_included: include_noise,
        })
    }

    /// Gradients of the kernel matrix with respect to log-hyperparameters and
    /// latent coordinates. Noise and jitter are excluded (their gradient is a
    /// plain diagonal and is handled by callers).
    pub fn grads(&self, latents: &DMatrix<f64>) -> Result<KernelGrads> {
        let n = latents.nrows();
        if n == 0 || latents.ncols() == 0 {
            return Err(Error::Input(
                "kernel gradients need at least one point of nonzero dimension".into(),
            ));
        }
        let theta1 = self.theta1();
        let inv_len_sq = (-2.0 * self.log_theta2).exp();

        let mut noiseless = DMatrix::zeros(n, n);
        let mut dist = DMatrix::zeros(n, n);
        for i in 0..n {
            noiseless[(i, i)] = theta1;
            for j in 0..i {
                let mut d2 = 0.0;
                for q in 0..latents.ncols() {
                    let diff = latents[(i, q)] - latents[(j, q)];
                    d2 += diff * diff;
                }
                let d = d2.sqrt();
                let v = theta1 * (-inv_len_sq * d).exp();
                noiseless[(i, j)] = v;
                noiseless[(j, i)] = v;
                dist[(i, j)] = d;
                dist[(j, i)] = d;
            }
        }

        // d k_ij / d x_i = coeff_ij * (x_i - x_j); zero at coincident points,
        // where the non-squared distance has a kink and we take the
        // zero subgradient.
        let mut latent_coeff = DMatrix::zeros(n, n);
        let mut wrt_log_theta2 = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = dist[(i, j)];
                wrt_log_theta2[(i, j)] = 2.0 * d * inv_len_sq * noiseless[(i, j)];
                if d > 0.0 {
                    latent_coeff[(i, j)] = -inv_len_sq * noiseless[(i, j)] / d;
                }
            }
        }

        Ok(KernelGrads {
            wrt_log_theta1: noiseless,
            wrt_log_theta2,
            latent_coeff,
            latents: latents.clone(),
        })
    }
}

/// Shared jitter-escalation helper: adds `start` to the diagonal, multiplying
/// by ten after every failed factorization, up to the module ceiling.
///
/// Returns the factorization, the jitter that succeeded and the loaded matrix.
pub(crate) fn factor_with_ladder(
    base: DMatrix<f64>,
    start: f64,
) -> Result<(Cholesky<f64, Dyn>, f64, DMatrix<f64>)> {
    let n = base.nrows();
    let mut attempted = Vec::new();
    let mut jitter = start;
    loop {
        attempted.push(jitter);
        let mut loaded = base.clone();
        for i in 0..n {
            loaded[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(loaded.clone()) {
            return Ok((chol, jitter, loaded));
        }
        jitter = if jitter == 0.0 { DEFAULT_JITTER } else { jitter * 10.0 };
        if jitter > JITTER_CEILING * (1.0 + 1e-12) {
            return Err(Error::CholeskyFailed { attempted });
        }
    }
}

/// A factorized kernel matrix.
///
/// Holds the loaded values (noise and the jitter that finally succeeded are
/// already on the diagonal), the Cholesky factor and the log-determinant.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    jitter_used: f64,
    noise_included: bool,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// The matrix entries, including diagonal loading.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Jitter that was actually applied (after any escalation).
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Whether observation noise was folded into the diagonal.
    pub fn noise_included(&self) -> bool {
        self.noise_included
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// Lower-triangular Cholesky factor.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Solves `K z = b` for a vector right-hand side.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Solves `K Z = B` column by column.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Explicit inverse; prefer [`solve`](Self::solve) unless the full
    /// inverse is genuinely needed (as in likelihood gradients).
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Kernel-matrix derivatives, structured to avoid materializing one `N x N`
/// matrix per latent coordinate.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    wrt_log_theta1: DMatrix<f64>,
    wrt_log_theta2: DMatrix<f64>,
    latent_coeff: DMatrix<f64>,
    latents: DMatrix<f64>,
}

impl KernelGrads {
    /// `dK/d log(theta1)`, which equals the noiseless kernel matrix.
    pub fn wrt_log_theta1(&self) -> &DMatrix<f64> {
        &self.wrt_log_theta1
    }

    /// `dK/d log(theta2)`: entrywise `2 * d_ij * theta2^{-2} * K_ij`.
    pub fn wrt_log_theta2(&self) -> &DMatrix<f64> {
        &self.wrt_log_theta2
    }

    /// `d k_ij / d x_i` for one pair, as a `Q`-vector.
    pub fn wrt_latent(&self, i: usize, j: usize) -> DVector<f64> {
        let q = self.latents.ncols();
        let mut out = DVector::zeros(q);
        if i == j {
            return out;
        }
        let c = self.latent_coeff[(i, j)];
        for k in 0..q {
            out[k] = c * (self.latents[(i, k)] - self.latents[(j, k)]);
        }
        out
    }

    /// Chains an upstream sensitivity `W` (with `W_ij = dL/dK_ij`, all
    /// entries treated independently) through the kernel to the latents,
    /// returning `dL/dX` as an `N x Q` matrix.
    ///
    /// Writing `A_ij = (W_ij + W_ji) * coeff_ij`, the result is
    /// `Diag(A 1) X - A X`, which costs two matrix products instead of
    /// `N^2 Q` vector accumulations.
    pub fn chain_latent(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.latents.nrows();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = (w[(i, j)] + w[(j, i)]) * self.latent_coeff[(i, j)];
            }
        }
        let row_sums = &a * DVector::from_element(n, 1.0);
        let mut out = -(&a * &self.latents);
        for i in 0..n {
            for q in 0..self.latents.ncols() {
                out[(i, q)] += row_sums[i] * self.latents[(i, q)];
            }
        }
        out
    }
}
