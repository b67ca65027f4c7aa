//! Deterministic input builders shared by the benchmarks: synthetic panels
//! shaped like the fitting and portfolio workloads, with their ground-truth
//! latents and covariance attached.

use tpfolio_core::data_io::{make_synthetic, Generator, SyntheticPanel, SyntheticSpec};

/// A seeded t-factor panel of `assets x periods`, with tail weight 5, the
/// same family the acceptance experiments use.
pub fn synthetic(assets: usize, periods: usize, seed: u64) -> SyntheticPanel {
    let spec = SyntheticSpec {
        n_assets: assets,
        n_periods: periods,
        generator: Generator::TFactor,
        nu: 5.0,
        seed,
        ..SyntheticSpec::default()
    };
    make_synthetic(&spec).expect("valid synthetic spec")
}
