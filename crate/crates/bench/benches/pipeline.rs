//! Timings of the numerical hot paths, bottom-up: kernel assembly with its
//! Cholesky factorization, the likelihood-and-gradient evaluation driving
//! every optimizer step, one bounded maximum-likelihood fit, and the
//! minimum-variance solve in both modes.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tpfolio_bench::synthetic;
use tpfolio_core::folio::{min_variance_weights, sample_covariance};
use tpfolio_core::kernels::KernelSpec;
use tpfolio_core::lvm::{
    fit_mle, gplvm_loglik_grad, tplvm_loglik_grad, LvmConfig, ModelKind, OptimizerConfig,
};

fn bench_kernel_matrix(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel_matrix");
    let spec = KernelSpec::exponential(0.0025, 1.0)
        .and_then(|s| s.with_noise_var(4e-4))
        .expect("valid kernel");
    for n in [16usize, 64] {
        let latents = synthetic(n, 8, 1).latents;
        g.bench_function(format!("assemble_factor_n{n}"), |b| {
            b.iter(|| spec.matrix(black_box(&latents), true).unwrap())
        });
    }
    g.finish();
}

fn bench_loglik_grad(c: &mut Criterion) {
    let mut g = c.benchmark_group("loglik_grad");
    let synth = synthetic(16, 120, 2);
    let y = synth.panel.values().transpose();
    let x = synth.latents;
    let spec = KernelSpec::exponential(0.0025, 1.0)
        .and_then(|s| s.with_noise_var(4e-4))
        .expect("valid kernel");
    g.bench_function("gplvm_n16_d120", |b| {
        b.iter(|| gplvm_loglik_grad(black_box(&y), black_box(&x), &spec).unwrap())
    });
    g.bench_function("tplvm_n16_d120", |b| {
        b.iter(|| tplvm_loglik_grad(black_box(&y), black_box(&x), &spec, 5.0).unwrap())
    });
    g.finish();
}

fn bench_fit_mle(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_mle");
    g.sample_size(10);
    let synth = synthetic(8, 60, 3);
    let y = synth.panel.values().transpose();
    for (name, model) in [("gplvm_n8_d60", ModelKind::Gplvm), ("tplvm_n8_d60", ModelKind::Tplvm)] {
        let config = LvmConfig {
            model,
            optimizer: OptimizerConfig {
                max_iters: 40,
                restarts: 1,
                tol: 1e-6,
                seed: 9,
                ..OptimizerConfig::default()
            },
            ..LvmConfig::default()
        };
        g.bench_function(name, |b| b.iter(|| fit_mle(black_box(&y), &config).unwrap()));
    }
    g.finish();
}

fn bench_min_variance(c: &mut Criterion) {
    let mut g = c.benchmark_group("min_variance");
    let synth = synthetic(16, 120, 4);
    let est = sample_covariance(synth.panel.values()).expect("well-posed sample covariance");
    g.bench_function("unconstrained_d16", |b| {
        b.iter(|| min_variance_weights(black_box(&est), false).unwrap())
    });
    g.bench_function("long_only_d16", |b| {
        b.iter(|| min_variance_weights(black_box(&est), true).unwrap())
    });
    g.finish();
}

criterion_group!(
    benches,
    bench_kernel_matrix,
    bench_loglik_grad,
    bench_fit_mle,
    bench_min_variance
);
criterion_main!(benches);
