//! Portfolio construction: model-implied covariance matrices,
//! minimum-variance weights and performance metrics.

use chrono::NaiveDate;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernels::factor_with_ladder;
use crate::lvm::{FittedLvm, ModelKind};

/// Where a covariance estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceSource {
    Gplvm,
    Tplvm,
    /// Plain empirical covariance of the window.
    Sample,
}

impl CovarianceSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            CovarianceSource::Gplvm => "gplvm",
            CovarianceSource::Tplvm => "tplvm",
            CovarianceSource::Sample => "samplecov",
        }
    }
}

/// Extra information attached to a covariance estimate.
#[derive(Debug, Clone, Default)]
pub struct CovarianceDiagnostics {
    /// Final fit objective, when the estimate came from a model.
    pub objective: Option<f64>,
    /// Fitted tail weight, when the estimate came from a t model.
    pub nu: Option<f64>,
    /// Ratio of extreme eigenvalues of the (loaded) matrix.
    pub condition_number: f64,
    /// Diagonal loading added on top of the raw estimate, if any was needed.
    pub jitter_added: f64,
}

/// A symmetric positive-definite covariance matrix that remembers which
/// estimator produced it.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    sigma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    source: CovarianceSource,
    /// Date range of the data window behind the estimate, when known.
    pub window: Option<(NaiveDate, NaiveDate)>,
    pub diagnostics: CovarianceDiagnostics,
}

impl CovarianceEstimate {
    /// Wraps a raw symmetric matrix, escalating diagonal jitter from zero
    /// until Cholesky succeeds (same ladder as the kernel module).
    pub fn new(
        sigma: DMatrix<f64>,
        source: CovarianceSource,
        mut diagnostics: CovarianceDiagnostics,
    ) -> Result<Self> {
        let n = sigma.nrows();
        if n == 0 || sigma.ncols() != n {
            return Err(Error::Input(format!(
                "covariance must be square and nonempty, got {}x{}",
                n,
                sigma.ncols()
            )));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("covariance entries must be finite".into()));
        }
        for i in 0..n {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-8 {
                    return Err(Error::Input("covariance must be symmetric".into()));
                }
            }
        }
        let (chol, jitter, loaded) = factor_with_ladder(sigma, 0.0)?;
        diagnostics.jitter_added = jitter;
        diagnostics.condition_number = condition_number(&loaded);
        Ok(Self {
            sigma: loaded,
            chol,
            source,
            window: None,
            diagnostics,
        })
    }

    pub fn with_window(mut self, start: NaiveDate, end: NaiveDate) -> Self {
        self.window = Some((start, end));
        self
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn source(&self) -> CovarianceSource {
        self.source
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for ev in eig.eigenvalues.iter() {
        lo = lo.min(*ev);
        hi = hi.max(*ev);
    }
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Model-implied covariance of the fitted points: the kernel matrix at the
/// fitted latents plus the fitted observation-noise variance.
///
/// Under the `nu > 2` convention the t model's scale matrix already *is* its
/// covariance, so Gaussian and t models are read out identically; the tail
/// weight changes the fit, not the read-out.
pub fn covariance_from_lvm(model: &FittedLvm) -> Result<CovarianceEstimate> {
    if model.latents.nrows() == 0 || model.latents.ncols() == 0 {
        return Err(Error::State("model has no fitted latents".into()));
    }
    if model.latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::State("model latents are not finite".into()));
    }
    let km = model.kernel_matrix()?;
    let source = match model.model {
        ModelKind::Gplvm => CovarianceSource::Gplvm,
        ModelKind::Tplvm => CovarianceSource::Tplvm,
    };
    CovarianceEstimate::new(
        km.values().clone(),
        source,
        CovarianceDiagnostics {
            objective: Some(model.objective()),
            nu: model.nu,
            ..Default::default()
        },
    )
}

/// Covariance conditioned on the fitted observations: for the t model the
/// kernel covariance is rescaled by `(nu + beta - 2) / (nu + ND - 2)`, where
/// `beta` is the pooled quadratic form of the fitted panel — turbulent
/// samples inflate forward-looking risk. For the Gaussian model this equals
/// [`covariance_from_lvm`], since Gaussian conditionals do not rescale.
pub fn predictive_covariance_from_lvm(
    model: &FittedLvm,
    y: &DMatrix<f64>,
) -> Result<CovarianceEstimate> {
    let base = covariance_from_lvm(model)?;
    let nu = match (model.model, model.nu) {
        (ModelKind::Gplvm, _) => return Ok(base),
        (ModelKind::Tplvm, Some(nu)) => nu,
        (ModelKind::Tplvm, None) => {
            return Err(Error::State("t model is missing its tail weight".into()));
        }
    };
    if y.nrows() != model.n_points() {
        return Err(Error::Input(format!(
            "observations have {} rows but the model has {} points",
            y.nrows(),
            model.n_points()
        )));
    }
    let km = model.kernel_matrix()?;
    let mut yc = y.clone();
    for i in 0..yc.nrows() {
        for j in 0..yc.ncols() {
            yc[(i, j)] -= model.mean[i];
        }
    }
    let alpha = km.solve(&yc);
    let beta = yc.component_mul(&alpha).sum();
    let nd = (y.nrows() * y.ncols()) as f64;
    let prefactor = (nu + beta - 2.0) / (nu + nd - 2.0);
    let sigma = base.sigma() * prefactor;
    CovarianceEstimate::new(
        sigma,
        CovarianceSource::Tplvm,
        CovarianceDiagnostics {
            objective: Some(model.objective()),
            nu: Some(nu),
            ..Default::default()
        },
    )
}

/// Empirical covariance of a `T x D` window of returns (rows are periods),
/// with the `T - 1` denominator.
pub fn sample_covariance(window: &DMatrix<f64>) -> Result<CovarianceEstimate> {
    let (t, d) = (window.nrows(), window.ncols());
    if t < 2 || d == 0 {
        return Err(Error::Input(format!(
            "sample covariance needs at least 2 rows and 1 column, got {t}x{d}"
        )));
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("returns must be finite".into()));
    }
    let means: Vec<f64> = (0..d).map(|j| window.column(j).sum() / t as f64).collect();
    let mut sigma = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..=a {
            let mut acc = 0.0;
            for r in 0..t {
                acc += (window[(r, a)] - means[a]) * (window[(r, b)] - means[b]);
            }
            let v = acc / (t as f64 - 1.0);
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    CovarianceEstimate::new(sigma, CovarianceSource::Sample, CovarianceDiagnostics::default())
}

/// Portfolio weights summing to one.
#[derive(Debug, Clone)]
pub struct PortfolioWeights {
    pub weights: DVector<f64>,
    pub long_only: bool,
    /// Rebalance date the weights were computed for, when known.
    pub as_of: Option<NaiveDate>,
}

/// Renormalizes so the sum is *exactly* 1.0: after dividing by the sum, the
/// residual round-off is folded into a single weight, repeating until the
/// recomputed sum lands on 1.0 bit for bit.
///
/// Targets are tried largest magnitude first — always far from zero, so a
/// correction of a few ulps cannot flip a long-only weight's sign, and
/// clamped (exactly zero) weights are never touched. One correction does not
/// always suffice: adding the residual perturbs the running sum's own
/// rounding, and a coordinate whose ulp is coarser than the residual cannot
/// express it at all, in which case the next-smaller coordinate takes over.
pub(crate) fn normalize_exact(w: &mut DVector<f64>) {
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| {
        w[b].abs()
            .partial_cmp(&w[a].abs())
            .expect("weights are finite")
    });
    for idx in order {
        if w[idx] == 0.0 {
            continue;
        }
        for _ in 0..8 {
            let s: f64 = w.iter().sum();
            if s == 1.0 {
                return;
            }
            let before = w[idx];
            w[idx] += 1.0 - s;
            if w[idx] == before {
                break;
            }
        }
    }
}

/// Minimum-variance weights under the full-investment constraint.
///
/// Unconstrained: `w = Sigma^{-1} 1 / (1^T Sigma^{-1} 1)` via the estimate's
/// Cholesky factor. Long-only: an active-set loop that solves the reduced
/// problem on the free assets, clamps negative weights to zero, and — when
/// the reduced solution is clean — checks the clamped assets' optimality
/// conditions, releasing any asset whose marginal variance says it should
/// re-enter. Terminates in finitely many steps; weights sum to 1.0 exactly.
pub fn min_variance_weights(
    cov: &CovarianceEstimate,
    long_only: bool,
) -> Result<PortfolioWeights> {
    let d = cov.dim();
    let ones = DVector::from_element(d, 1.0);

    if !long_only {
        let z = cov.cholesky().solve(&ones);
        let denom = z.sum();
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::Numerical(format!(
                "1' Sigma^{{-1}} 1 = {denom} is not positive; covariance is not usable"
            )));
        }
        let mut w = z / denom;
        normalize_exact(&mut w);
        return Ok(PortfolioWeights { weights: w, long_only, as_of: None });
    }

    // Active-set loop. `free[i]` marks assets allowed a nonzero weight.
    let mut free = vec![true; d];
    let sigma = cov.sigma();
    // Clamp-then-release needs at most one pass per sign change; cap
    // generously so a logic error cannot spin forever.
    let max_passes = 4 * d + 8;
    for _ in 0..max_passes {
        let idx: Vec<usize> = (0..d).filter(|&i| free[i]).collect();
        if idx.is_empty() {
            return Err(Error::Numerical(
                "active-set loop clamped every asset; covariance is not usable".into(),
            ));
        }
        let k = idx.len();
        let mut sub = DMatrix::zeros(k, k);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                sub[(a, b)] = sigma[(i, j)];
            }
        }
        let chol = match Cholesky::new(sub) {
            Some(c) => c,
            None => {
                return Err(Error::Numerical(
                    "free-asset covariance block lost positive definiteness".into(),
                ));
            }
        };
        let sub_ones = DVector::from_element(k, 1.0);
        let z = chol.solve(&sub_ones);
        let denom = z.sum();
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::Numerical(format!(
                "1' Sigma^{{-1}} 1 = {denom} on the free set is not positive"
            )));
        }
        let sub_w = z / denom;

        if let Some((worst_pos, _)) = sub_w
            .iter()
            .enumerate()
            .filter(|(_, v)| **v < 0.0)
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("weights are finite"))
        {
            // Clamp the most negative free asset and re-solve.
            free[idx[worst_pos]] = false;
            continue;
        }

        let mut weights = DVector::zeros(d);
        for (a, &i) in idx.iter().enumerate() {
            weights[i] = sub_w[a];
        }

        // Optimality check for the clamped assets: with multiplier
        // lambda = 2 w' Sigma w (from the free-set stationarity), a clamped
        // asset strictly below lambda/2 in marginal variance (Sigma w)_i
        // would reduce variance if re-admitted.
        let marginal = sigma * &weights;
        let lambda_half = weights.dot(&marginal);
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..d {
            if free[i] {
                continue;
            }
            let slack = marginal[i] - lambda_half;
            if slack < -1e-12 && worst.map_or(true, |(_, s)| slack < s) {
                worst = Some((i, slack));
            }
        }
        match worst {
            Some((i, _)) => {
                free[i] = true;
            }
            None => {
                normalize_exact(&mut weights);
                return Ok(PortfolioWeights { weights, long_only, as_of: None });
            }
        }
    }
    Err(Error::Numerical(
        "active-set loop failed to settle; covariance is likely degenerate".into(),
    ))
}

/// Annualized performance of one realized-return sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodMetrics {
    /// Annualized mean return: `(P/T) * sum(r_t)`.
    pub ret: f64,
    /// Annualized risk: `sqrt((P/(T-1)) * sum((r_t - mean)^2))`.
    pub risk: f64,
    /// Return over risk; `None` when the risk is exactly zero.
    pub rr: Option<f64>,
}

/// Computes annualized return, risk and their ratio for a realized-return
/// sequence with `periods_per_year` observations per year.
pub fn portfolio_metrics(returns: &[f64], periods_per_year: u32) -> Result<PeriodMetrics> {
    let t = returns.len();
    if t < 2 {
        return Err(Error::Input(format!(
            "metrics need at least 2 returns, got {t}"
        )));
    }
    if periods_per_year == 0 {
        return Err(Error::Input("periods_per_year must be positive".into()));
    }
    if returns.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("returns must be finite".into()));
    }
    let p = periods_per_year as f64;
    let tf = t as f64;
    let sum: f64 = returns.iter().sum();
    let ret = p / tf * sum;
    let mean = sum / tf;
    let ss = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>();
    let risk = (p * ss / (tf - 1.0)).sqrt();
    let rr = if risk == 0.0 { None } else { Some(ret / risk) };
    Ok(PeriodMetrics { ret, risk, rr })
}

/// Distribution summary of a return series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStats {
    /// Annualized mean.
    pub mean_ann: f64,
    /// Annualized standard deviation (sample, `T - 1`).
    pub std_ann: f64,
    /// Ratio of the two.
    pub rr: Option<f64>,
    /// Standardized third central moment (population).
    pub skewness: f64,
    /// Standardized fourth central moment (population, *not* excess:
    /// a normal sample approaches 3).
    pub kurtosis: f64,
}

/// Per-series summary statistics over raw (per-period) returns.
pub fn summary_stats(returns: &[f64], periods_per_year: u32) -> Result<SummaryStats> {
    let t = returns.len();
    if t < 4 {
        return Err(Error::Input(format!(
            "summary statistics need at least 4 returns, got {t}"
        )));
    }
    if periods_per_year == 0 {
        return Err(Error::Input("periods_per_year must be positive".into()));
    }
    if returns.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("returns must be finite".into()));
    }
    let p = periods_per_year as f64;
    let tf = t as f64;
    let mean = returns.iter().sum::<f64>() / tf;
    let m2 = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / tf;
    if m2 <= 0.0 {
        return Err(Error::Input(
            "summary statistics are undefined for a constant series".into(),
        ));
    }
    let m3 = returns.iter().map(|r| (r - mean).powi(3)).sum::<f64>() / tf;
    let m4 = returns.iter().map(|r| (r - mean).powi(4)).sum::<f64>() / tf;
    let sample_var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (tf - 1.0);
    let mean_ann = p * mean;
    let std_ann = (p * sample_var).sqrt();
    Ok(SummaryStats {
        mean_ann,
        std_ann,
        rr: if std_ann == 0.0 { None } else { Some(mean_ann / std_ann) },
        skewness: m3 / m2.powf(1.5),
        kurtosis: m4 / (m2 * m2),
    })
}
