//! Latent-variable covariance models for asset-return panels, and the
//! minimum-variance portfolio machinery built on top of them.
//!
//! The crate is organized bottom-up:
//!
//! - [`kernels`]: the exponential covariance kernel, its Cholesky
//!   factorization with an escalating jitter ladder, and analytic
//!   derivatives with respect to hyperparameters and inputs.
//! - [`tprocess`]: multivariate Gaussian and Student-t densities, sampling,
//!   and exact conditioning, including the t's degrees-of-freedom update.
//! - [`lvm`]: latent variable models with Gaussian-process and t-process
//!   likelihoods, fitted by maximum likelihood (gradient ascent with
//!   restarts) or by a fixed-draw variational scheme.
//! - [`folio`]: covariance extraction from fitted models, minimum-variance
//!   weights (optionally long-only), and performance metrics.
//! - [`backtest`]: rolling-window backtests with per-split reporting and
//!   report comparison.
//! - [`data_io`]: CSV return/price panels with exact row/column error
//!   positions, plus synthetic panels with known ground truth.
//!
//! Everything that draws randomness takes an explicit seed and derives
//! per-purpose streams from it (see [`seeds`]), so every result in the crate
//! is reproducible bit for bit.

pub mod backtest;
pub mod data_io;
pub mod error;
pub mod folio;
pub mod kernels;
pub mod lvm;
pub mod seeds;
pub mod tprocess;

pub use error::{Error, Result};

pub use backtest::{run_backtest, BacktestConfig, BacktestReport, CovModel};
pub use data_io::{load_panel, parse_panel, PanelKind, ReturnsPanel};
pub use folio::{min_variance_weights, CovarianceEstimate, PortfolioWeights};
pub use kernels::{KernelFamily, KernelSpec};
pub use lvm::{fit, FittedLvm, LvmConfig, ModelKind};
pub use tprocess::{MvGaussian, MvStudentT};
