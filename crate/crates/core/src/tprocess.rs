//! Multivariate Gaussian and Student's t distributions, their log-densities,
//! conditionals and samplers.
//!
//! The t distribution here is parameterized so that its scale matrix *is*
//! its covariance, which requires `nu > 2`. That convention keeps Gaussian
//! and t models directly comparable: both expose the same covariance, and as
//! `nu` grows the t density converges to the Gaussian with the same matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::kernels::factor_with_ladder;

const LN_2PI: f64 = 1.8378770664093453; // ln(2 pi)

fn check_mean_cov(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<()> {
    let n = mean.len();
    if n == 0 {
        return Err(Error::Input("distribution dimension must be positive".into()));
    }
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::Input(format!(
            "covariance must be {n}x{n} to match the mean, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("mean and covariance must be finite".into()));
    }
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            max_asym = max_asym.max((cov[(i, j)] - cov[(j, i)]).abs());
        }
    }
    if max_asym > 1e-8 {
        return Err(Error::Input(format!(
            "covariance must be symmetric (max asymmetry {max_asym:.3e})"
        )));
    }
    Ok(())
}

/// Multivariate Gaussian with dense covariance.
#[derive(Debug, Clone)]
pub struct MvGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl MvGaussian {
    /// Builds the distribution, factorizing the covariance once.
    ///
    /// The covariance must be symmetric positive definite; factorization
    /// failure is reported as a numerical error (no jitter is added here —
    /// callers own their diagonal loading policy).
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_mean_cov(&mean, &cov)?;
        let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
            Error::Numerical("covariance is not positive definite".into())
        })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { mean, cov, chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Log-density at `y`.
    pub fn logpdf(&self, y: &DVector<f64>) -> Result<f64> {
        let n = self.dim();
        if y.len() != n {
            return Err(Error::Input(format!(
                "observation has dimension {}, expected {n}",
                y.len()
            )));
        }
        let r = y - &self.mean;
        let alpha = self.chol.solve(&r);
        let quad = r.dot(&alpha);
        Ok(-0.5 * (n as f64 * LN_2PI + self.log_det + quad))
    }

    /// Draws `count` samples, one per row, using a ChaCha stream seeded with
    /// `seed`. The same seed always yields the same draws.
    pub fn sample(&self, count: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = self.chol.l();
        let n = self.dim();
        let mut out = DMatrix::zeros(count, n);
        let mut z = DVector::zeros(n);
        for s in 0..count {
            for i in 0..n {
                z[i] = rng.sample(StandardNormal);
            }
            let y = &self.mean + &l * &z;
            out.row_mut(s).copy_from(&y.transpose());
        }
        out
    }
}

/// Multivariate Student's t with `nu > 2`, scale equal to covariance.
#[derive(Debug, Clone)]
pub struct MvStudentT {
    mean: DVector<f64>,
    scale: DMatrix<f64>,
    dof: f64,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl MvStudentT {
    /// Builds the distribution; `dof` must exceed 2 so the scale matrix is
    /// the covariance.
    pub fn new(mean: DVector<f64>, scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        check_mean_cov(&mean, &scale)?;
        if !(dof > 2.0) || !dof.is_finite() {
            return Err(Error::Input(format!(
                "degrees of freedom must exceed 2 (scale = covariance), got {dof}"
            )));
        }
        let chol = Cholesky::new(scale.clone()).ok_or_else(|| {
            Error::Numerical("scale matrix is not positive definite".into())
        })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { mean, scale, dof, chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Scale matrix, which equals the covariance under `nu > 2`.
    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    /// Log-density at `y`.
    ///
    /// For `nu -> infinity` this converges to the Gaussian log-density with
    /// the same mean and covariance.
    pub fn logpdf(&self, y: &DVector<f64>) -> Result<f64> {
        let n = self.dim();
        if y.len() != n {
            return Err(Error::Input(format!(
                "observation has dimension {}, expected {n}",
                y.len()
            )));
        }
        let r = y - &self.mean;
        let alpha = self.chol.solve(&r);
        let quad = r.dot(&alpha);
        Ok(t_logpdf_terms(n as f64, self.dof, self.log_det, quad))
    }

    /// Draws `count` samples (one per row) via the scale-mixture
    /// representation: `y = mean + sqrt((nu - 2) / g) * L z` with
    /// `g ~ chi-square(nu)` and `z` standard normal. Deterministic in `seed`;
    /// the sample covariance converges to the scale matrix.
    pub fn sample(&self, count: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chi2 = ChiSquared::new(self.dof).expect("dof > 2 validated at construction");
        let l = self.chol.l();
        let n = self.dim();
        let mut out = DMatrix::zeros(count, n);
        let mut z = DVector::zeros(n);
        for s in 0..count {
            let g: f64 = chi2.sample(&mut rng);
            let shrink = ((self.dof - 2.0) / g).sqrt();
            for i in 0..n {
                z[i] = rng.sample(StandardNormal);
            }
            let y = &self.mean + (&l * &z) * shrink;
            out.row_mut(s).copy_from(&y.transpose());
        }
        out
    }
}

/// Shared t log-density kernel: dimension `n`, degrees of freedom `nu`,
/// log-determinant of the scale matrix and quadratic form `quad`.
pub(crate) fn t_logpdf_terms(n: f64, nu: f64, log_det: f64, quad: f64) -> f64 {
    ln_gamma((nu + n) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * n * ((nu - 2.0) * std::f64::consts::PI).ln()
        - 0.5 * log_det
        - 0.5 * (nu + n) * (quad / (nu - 2.0)).ln_1p()
}

/// Result of conditioning a joint distribution on observed coordinates.
#[derive(Debug, Clone)]
pub struct ConditionalUpdate {
    /// Conditional mean at the unobserved coordinates.
    pub mean_star: DVector<f64>,
    /// Conditional covariance at the unobserved coordinates.
    pub cov_star: DMatrix<f64>,
    /// Quadratic form `(y - m)^T K_xx^{-1} (y - m)` of the observations.
    pub beta: f64,
    /// Updated degrees of freedom (t case only).
    pub dof_star: Option<f64>,
}

fn conditional_parts(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    observed: &DVector<f64>,
    n_observed: usize,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let total = mean.len();
    if n_observed == 0 || n_observed >= total {
        return Err(Error::Input(format!(
            "conditioning needs 0 < observed ({n_observed}) < total ({total})"
        )));
    }
    if observed.len() != n_observed {
        return Err(Error::Input(format!(
            "observed values have length {}, expected {n_observed}",
            observed.len()
        )));
    }
    let n_star = total - n_observed;
    let m_x = mean.rows(0, n_observed).into_owned();
    let m_s = mean.rows(n_observed, n_star).into_owned();
    let k_xx = cov.view((0, 0), (n_observed, n_observed)).into_owned();
    let k_sx = cov.view((n_observed, 0), (n_star, n_observed)).into_owned();
    let k_ss = cov.view((n_observed, n_observed), (n_star, n_star)).into_owned();

    let chol = Cholesky::new(k_xx).ok_or_else(|| {
        Error::Numerical("observed block of the covariance is singular".into())
    })?;
    let resid = observed - &m_x;
    let alpha = chol.solve(&resid);
    let beta = resid.dot(&alpha);

    // The conditional mean includes the mean correction at the observed
    // coordinates — conditioning on residuals, not raw values.
    let mean_star = &m_s + &k_sx * &alpha;

    let t = chol.solve(&k_sx.transpose());
    let mut cov_star = &k_ss - &k_sx * &t;
    // Symmetrize to remove factorization round-off.
    for i in 0..n_star {
        for j in 0..i {
            let v = 0.5 * (cov_star[(i, j)] + cov_star[(j, i)]);
            cov_star[(i, j)] = v;
            cov_star[(j, i)] = v;
        }
    }
    Ok((mean_star, cov_star, beta))
}

/// Conditions a joint Gaussian on its first `n_observed` coordinates.
///
/// The remaining coordinates get mean `m* + K_sx K_xx^{-1} (y - m_x)` and
/// covariance `K_ss - K_sx K_xx^{-1} K_xs`.
pub fn gauss_condition(
    prior: &MvGaussian,
    observed: &DVector<f64>,
    n_observed: usize,
) -> Result<ConditionalUpdate> {
    let (mean_star, cov_star, beta) =
        conditional_parts(prior.mean(), prior.cov(), observed, n_observed)?;
    Ok(ConditionalUpdate { mean_star, cov_star, beta, dof_star: None })
}

/// Conditions a joint Student's t on its first `n_observed` coordinates.
///
/// The conditional is again t with `nu* = nu + n_observed`, the Gaussian
/// conditional mean, and the Gaussian conditional covariance rescaled by
/// `(nu + beta - 2) / (nu + n_observed - 2)` — observations that sit far
/// from the mean (large `beta`) inflate downstream uncertainty.
pub fn t_condition(
    prior: &MvStudentT,
    observed: &DVector<f64>,
    n_observed: usize,
) -> Result<ConditionalUpdate> {
    let (mean_star, mut cov_star, beta) =
        conditional_parts(prior.mean(), prior.scale(), observed, n_observed)?;
    let nu = prior.dof();
    let prefactor = (nu + beta - 2.0) / (nu + n_observed as f64 - 2.0);
    cov_star *= prefactor;
    Ok(ConditionalUpdate {
        mean_star,
        cov_star,
        beta,
        dof_star: Some(nu + n_observed as f64),
    })
}

/// Joint Gaussian over observed-then-unobserved kernel points, built from
/// latent coordinates: the first `x.nrows()` rows of `joint` are treated as
/// observed when conditioning.
///
/// Convenience for building the prior that `gauss_condition`/`t_condition`
/// expect, with the kernel's jitter ladder guaranteeing factorization.
pub fn joint_from_kernel(
    mean: DVector<f64>,
    kernel_values: DMatrix<f64>,
) -> Result<MvGaussian> {
    check_mean_cov(&mean, &kernel_values)?;
    let (chol, _, values) = factor_with_ladder(kernel_values, 0.0)?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(MvGaussian { mean, cov: values, chol, log_det })
}
