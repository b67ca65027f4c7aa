//! Shared oracles for the integration suite.
//!
//! Everything in this module recomputes its target quantity from first
//! principles — finite differences, composite quadrature, Monte Carlo with
//! batch-means errors, projected-gradient optimization — so the library's
//! analytic code paths are checked against genuinely independent arithmetic.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Central finite difference with step `h`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Composite Simpson rule on `[a, b]` with `n` (even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n >= 2 && n % 2 == 0, "Simpson needs an even interval count");
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        acc += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    acc * h / 3.0
}

/// `log(sum(exp(v)))` without overflow.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean and batch-means standard error of a Monte Carlo sequence.
///
/// The draws are split into `batches` contiguous blocks; the standard error
/// is the standard deviation of the block means over `sqrt(batches)`. For
/// ratio estimators pass the per-block ratios via [`batch_ratio_se`].
pub fn batch_means(samples: &[f64], batches: usize) -> (f64, f64) {
    assert!(batches >= 2 && samples.len() >= batches);
    let block = samples.len() / batches;
    let used = block * batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| samples[b * block..(b + 1) * block].iter().sum::<f64>() / block as f64)
        .collect();
    let grand = samples[..used].iter().sum::<f64>() / used as f64;
    let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (batches - 1) as f64;
    (grand, (var / batches as f64).sqrt())
}

/// Self-normalized importance-sampling estimate `sum(w*v)/sum(w)` with a
/// batch-means standard error: the ratio is recomputed on each block and the
/// spread of the block ratios sets the error bar.
pub fn batch_ratio_se(weights: &[f64], values: &[f64], batches: usize) -> (f64, f64) {
    assert_eq!(weights.len(), values.len());
    assert!(batches >= 2 && weights.len() >= batches);
    let block = weights.len() / batches;
    let used = block * batches;
    let mut ratios = Vec::with_capacity(batches);
    for b in 0..batches {
        let lo = b * block;
        let hi = lo + block;
        let num: f64 = (lo..hi).map(|i| weights[i] * values[i]).sum();
        let den: f64 = weights[lo..hi].iter().sum();
        ratios.push(num / den);
    }
    let num: f64 = (0..used).map(|i| weights[i] * values[i]).sum();
    let den: f64 = weights[..used].iter().sum();
    let grand = num / den;
    let var = ratios.iter().map(|r| (r - grand) * (r - grand)).sum::<f64>() / (batches - 1) as f64;
    (grand, (var / batches as f64).sqrt())
}

/// Euclidean projection onto the probability simplex
/// `{w : w >= 0, sum(w) = 1}` (sort-and-threshold).
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let d = v.len();
    let mut u: Vec<f64> = v.iter().cloned().collect();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut css = 0.0;
    let mut rho = 0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            rho = j + 1;
            tau = t;
        }
    }
    debug_assert!(rho > 0);
    DVector::from_fn(d, |i, _| (v[i] - tau).max(0.0))
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn lambda_max(sigma: &DMatrix<f64>) -> f64 {
    let d = sigma.nrows();
    let mut v = DVector::from_element(d, 1.0 / (d as f64).sqrt());
    let mut lam = 0.0;
    for _ in 0..500 {
        let w = sigma * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        lam = (sigma * &v).dot(&v);
    }
    lam
}

/// Minimum-variance weights by projected gradient descent.
///
/// Minimizes `w' Sigma w` over the full-investment hyperplane, intersected
/// with the nonnegative cone when `long_only` is set. The step size is set
/// from the largest eigenvalue, and the iterate is re-projected after every
/// step; with the iteration budgets used by the acceptance tests the
/// objective is converged far beyond the comparison tolerance.
pub fn qp_min_variance(sigma: &DMatrix<f64>, long_only: bool, iters: usize) -> DVector<f64> {
    let d = sigma.nrows();
    let step = 1.0 / (2.0 * lambda_max(sigma)).max(1e-12);
    let project = |w: &DVector<f64>| -> DVector<f64> {
        if long_only {
            project_simplex(w)
        } else {
            let shift = (1.0 - w.sum()) / d as f64;
            w.add_scalar(shift)
        }
    };
    let mut w = project(&DVector::from_element(d, 1.0 / d as f64));
    for _ in 0..iters {
        let grad = 2.0 * (sigma * &w);
        w = project(&(&w - step * grad));
    }
    w
}

/// Random symmetric positive-definite matrix `A'A/d + ridge*I`.
pub fn random_spd(rng: &mut impl Rng, d: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| {
        // Box-Muller from two uniforms keeps the dependency surface small.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    });
    let mut m = (a.transpose() * &a) / d as f64;
    for i in 0..d {
        m[(i, i)] += ridge;
    }
    m
}
