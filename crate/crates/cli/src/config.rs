//! Run configuration: defaults, a flat `key = value` config file, and
//! command-line overrides, applied in that order (later sources win field by
//! field).
//!
//! The file holds one `key = value` per line; blank lines are skipped and
//! everything after `#` is a comment. Unknown keys are rejected with their
//! line number, and every value is range-checked here, before any data is
//! read or any fitting starts. Reporting splits repeat the `split` key with
//! a `label, start, end` value:
//!
//! ```text
//! model  = tplvm          # or gplvm, samplecov
//! window = 120
//! split  = Anterior half, 2010-01-31, 2014-12-31
//! split  = Posterior half, 2015-01-31, 2019-12-31
//! ```
//!
//! The config is the union of everything the subcommands consume; keys a
//! given subcommand has no use for are simply ignored by it, so one file can
//! drive a whole simulate/fit/backtest pipeline.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use tpfolio_core::backtest::{BacktestConfig, CovModel, CovarianceMode, SplitSpec};
use tpfolio_core::data_io::{Generator, PanelKind, SyntheticSpec};
use tpfolio_core::lvm::{Inference, LvmConfig, MeanMode, ModelKind, OptimizerConfig};
use tpfolio_core::{Error, Result};

use crate::CommonArgs;

/// Every setting any subcommand consumes, flattened to scalars so the file
/// format stays one `key = value` per line.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Input panel path (`fit`, `backtest`, `stats`).
    pub data: Option<PathBuf>,
    /// Directory output files land in; created on demand.
    pub out: PathBuf,
    /// Whether `data` holds returns or prices.
    pub kind: PanelKind,
    /// Master seed; every random stage derives its own stream from it.
    pub seed: u64,
    /// Covariance estimator (`fit` accepts the two latent models only).
    pub model: CovModel,
    /// Look-back length in periods.
    pub window: usize,
    /// Refit cadence: 1 refits every period.
    pub rebalance_every: usize,
    pub long_only: bool,
    pub covariance: CovarianceMode,
    pub periods_per_year: u32,
    /// Reporting splits; when empty, `backtest` splits the evaluation span
    /// into anterior and posterior halves.
    pub splits: Vec<SplitSpec>,
    /// Latent dimension Q.
    pub latent_dim: usize,
    pub inference: Inference,
    pub mean_mode: MeanMode,
    /// Derive starting kernel hyperparameters from the data scale.
    pub heuristic_init: bool,
    /// Monte Carlo draws for the variational objective.
    pub mc_samples: usize,
    /// Pin the t-model tail weight instead of learning it.
    pub fixed_nu: Option<f64>,
    /// Starting tail weight when learning.
    pub nu_init: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub tol: f64,
    pub initial_step: f64,
    pub shrink: f64,
    pub grow: f64,
    /// Synthetic-panel shape (`simulate`).
    pub assets: usize,
    pub periods: usize,
    pub generator: Generator,
    /// Tail weight of the synthetic t generator.
    pub nu: f64,
    /// Ground-truth latent dimension of the synthetic panel.
    pub q_true: usize,
    /// First synthetic observation date.
    pub start: NaiveDate,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lvm = LvmConfig::default();
        let bt = BacktestConfig::default();
        let synth = SyntheticSpec::default();
        Self {
            data: None,
            out: PathBuf::from("."),
            kind: PanelKind::Returns,
            seed: bt.seed,
            model: bt.model,
            window: bt.window,
            rebalance_every: bt.rebalance_every,
            long_only: bt.long_only,
            covariance: bt.covariance,
            periods_per_year: bt.periods_per_year,
            splits: Vec::new(),
            latent_dim: lvm.latent_dim,
            inference: lvm.inference,
            mean_mode: lvm.mean_mode,
            heuristic_init: lvm.heuristic_init,
            mc_samples: lvm.mc_samples,
            fixed_nu: lvm.fixed_nu,
            nu_init: lvm.nu_init,
            max_iters: lvm.optimizer.max_iters,
            restarts: lvm.optimizer.restarts,
            tol: lvm.optimizer.tol,
            initial_step: lvm.optimizer.initial_step,
            shrink: lvm.optimizer.shrink,
            grow: lvm.optimizer.grow,
            assets: synth.n_assets,
            periods: synth.n_periods,
            generator: synth.generator,
            nu: synth.nu,
            q_true: synth.q_true,
            start: synth.start,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the config file (when given) and then with the
    /// flags, validated as a whole.
    pub fn from_args(args: &CommonArgs) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = &args.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_flags(args)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| annotate_io(e.into(), path))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                bad(lineno, format!("expected `key = value`, got `{line}`"))
            })?;
            self.set(key.trim(), value.trim(), lineno)?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, lineno: usize) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "kind" => {
                self.kind = match value {
                    "returns" => PanelKind::Returns,
                    "prices" => PanelKind::Prices,
                    other => {
                        return Err(bad(
                            lineno,
                            format!("`kind` must be returns or prices, got `{other}`"),
                        ))
                    }
                }
            }
            "seed" => self.seed = parse_num(key, value, lineno)?,
            "model" => {
                self.model = CovModel::parse(value).map_err(|_| {
                    bad(lineno, format!("`model` must be gplvm, tplvm or samplecov, got `{value}`"))
                })?
            }
            "window" => self.window = parse_num(key, value, lineno)?,
            "rebalance_every" => self.rebalance_every = parse_num(key, value, lineno)?,
            "long_only" => self.long_only = parse_bool(key, value, lineno)?,
            "covariance" => {
                self.covariance = match value {
                    "fitted" => CovarianceMode::Fitted,
                    "predictive" => CovarianceMode::Predictive,
                    other => {
                        return Err(bad(
                            lineno,
                            format!("`covariance` must be fitted or predictive, got `{other}`"),
                        ))
                    }
                }
            }
            "periods_per_year" => self.periods_per_year = parse_num(key, value, lineno)?,
            "split" => self.splits.push(parse_split(value, lineno)?),
            "latent_dim" => self.latent_dim = parse_num(key, value, lineno)?,
            "inference" => {
                self.inference = match value {
                    "mle" => Inference::Mle,
                    "variational" => Inference::Variational,
                    other => {
                        return Err(bad(
                            lineno,
                            format!("`inference` must be mle or variational, got `{other}`"),
                        ))
                    }
                }
            }
            "mean_mode" => {
                self.mean_mode = match value {
                    "zero" => MeanMode::Zero,
                    "empirical" => MeanMode::EmpiricalRow,
                    other => {
                        return Err(bad(
                            lineno,
                            format!("`mean_mode` must be zero or empirical, got `{other}`"),
                        ))
                    }
                }
            }
            "heuristic_init" => self.heuristic_init = parse_bool(key, value, lineno)?,
            "mc_samples" => self.mc_samples = parse_num(key, value, lineno)?,
            "fixed_nu" => {
                self.fixed_nu = match value {
                    "none" => None,
                    v => Some(parse_num(key, v, lineno)?),
                }
            }
            "nu_init" => self.nu_init = parse_num(key, value, lineno)?,
            "max_iters" => self.max_iters = parse_num(key, value, lineno)?,
            "restarts" => self.restarts = parse_num(key, value, lineno)?,
            "tol" => self.tol = parse_num(key, value, lineno)?,
            "initial_step" => self.initial_step = parse_num(key, value, lineno)?,
            "shrink" => self.shrink = parse_num(key, value, lineno)?,
            "grow" => self.grow = parse_num(key, value, lineno)?,
            "assets" => self.assets = parse_num(key, value, lineno)?,
            "periods" => self.periods = parse_num(key, value, lineno)?,
            "generator" => {
                self.generator = match value {
                    "gaussian" => Generator::GaussianFactor,
                    "t" => Generator::TFactor,
                    other => {
                        return Err(bad(
                            lineno,
                            format!("`generator` must be gaussian or t, got `{other}`"),
                        ))
                    }
                }
            }
            "nu" => self.nu = parse_num(key, value, lineno)?,
            "q_true" => self.q_true = parse_num(key, value, lineno)?,
            "start" => self.start = parse_date(key, value, lineno)?,
            other => return Err(bad(lineno, format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn apply_flags(&mut self, args: &CommonArgs) -> Result<()> {
        if let Some(p) = &args.data {
            self.data = Some(p.clone());
        }
        if let Some(m) = &args.model {
            self.model = CovModel::parse(m)?;
        }
        if let Some(w) = args.window {
            self.window = w;
        }
        if let Some(q) = args.latent_dim {
            self.latent_dim = q;
        }
        if args.long_only {
            self.long_only = true;
        }
        if let Some(s) = args.seed {
            self.seed = s;
        }
        if let Some(o) = &args.out {
            self.out = o.clone();
        }
        Ok(())
    }

    /// Range checks on every field. Checks that need the data (window versus
    /// panel length, split coverage) stay with the computations.
    fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Input("window must span at least 2 periods".into()));
        }
        if self.rebalance_every == 0 {
            return Err(Error::Input("rebalance_every must be at least 1".into()));
        }
        if self.periods_per_year == 0 {
            return Err(Error::Input("periods_per_year must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Input("latent_dim must be at least 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Input("mc_samples must be at least 1".into()));
        }
        if let Some(nu) = self.fixed_nu {
            if !(nu > 2.0) {
                return Err(Error::Input(format!("fixed_nu must exceed 2, got {nu}")));
            }
        }
        if !(self.nu_init > 2.0) {
            return Err(Error::Input(format!("nu_init must exceed 2, got {}", self.nu_init)));
        }
        if self.max_iters == 0 {
            return Err(Error::Input("max_iters must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Input("restarts must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Input(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.initial_step > 0.0) || !self.initial_step.is_finite() {
            return Err(Error::Input(format!(
                "initial_step must be positive and finite, got {}",
                self.initial_step
            )));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Input(format!(
                "shrink must lie in (0, 1), got {}",
                self.shrink
            )));
        }
        if !(self.grow >= 1.0) || !self.grow.is_finite() {
            return Err(Error::Input(format!("grow must be at least 1, got {}", self.grow)));
        }
        for s in &self.splits {
            if s.start > s.end {
                return Err(Error::Input(format!(
                    "split `{}` has start {} after end {}",
                    s.label, s.start, s.end
                )));
            }
        }
        if self.assets == 0 {
            return Err(Error::Input("assets must be at least 1".into()));
        }
        if self.periods < 2 {
            return Err(Error::Input("periods must be at least 2".into()));
        }
        if self.q_true == 0 {
            return Err(Error::Input("q_true must be at least 1".into()));
        }
        if self.generator == Generator::TFactor && !(self.nu > 2.0) {
            return Err(Error::Input(format!("nu must exceed 2, got {}", self.nu)));
        }
        Ok(())
    }

    /// Latent-model settings for `model`, with the optimizer seeded by
    /// `seed`. The starting kernel is the library default; `heuristic_init`
    /// re-derives its hyperparameters from the data anyway.
    pub fn lvm_config(&self, model: ModelKind, seed: u64) -> LvmConfig {
        LvmConfig {
            model,
            latent_dim: self.latent_dim,
            kernel: LvmConfig::default().kernel,
            heuristic_init: self.heuristic_init,
            mean_mode: self.mean_mode,
            inference: self.inference,
            optimizer: OptimizerConfig {
                max_iters: self.max_iters,
                initial_step: self.initial_step,
                shrink: self.shrink,
                grow: self.grow,
                tol: self.tol,
                restarts: self.restarts,
                seed,
            },
            mc_samples: self.mc_samples,
            fixed_nu: self.fixed_nu,
            nu_init: self.nu_init,
        }
    }

    /// Backtest settings with the given reporting splits. The embedded
    /// latent-model kind and per-rebalance seeds are overridden inside the
    /// backtest; the placeholder kind here is irrelevant for `samplecov`.
    pub fn backtest_config(&self, splits: Vec<SplitSpec>) -> BacktestConfig {
        let kind = match self.model {
            CovModel::Tplvm => ModelKind::Tplvm,
            _ => ModelKind::Gplvm,
        };
        BacktestConfig {
            window: self.window,
            rebalance_every: self.rebalance_every,
            model: self.model,
            lvm: self.lvm_config(kind, self.seed),
            long_only: self.long_only,
            covariance: self.covariance,
            periods_per_year: self.periods_per_year,
            seed: self.seed,
            splits,
        }
    }
}

/// Prefixes file-system failures with the path they concern; `io::Error`
/// itself does not carry it.
pub(crate) fn annotate_io(err: Error, path: &Path) -> Error {
    match err {
        Error::Io(io) => {
            Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        other => other,
    }
}

fn bad(lineno: usize, what: String) -> Error {
    Error::Input(format!("config line {lineno}: {what}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, lineno: usize) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| bad(lineno, format!("`{key}` cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str, lineno: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad(lineno, format!("`{key}` must be true or false, got `{other}`"))),
    }
}

fn parse_date(key: &str, value: &str, lineno: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(value, "%Y-%m-%d")
        .map_err(|_| bad(lineno, format!("`{key}` must be an ISO date (YYYY-MM-DD), got `{value}`")))
}

/// Parses `label, start, end`. Dates are split off from the right so labels
/// may themselves contain commas.
fn parse_split(value: &str, lineno: usize) -> Result<SplitSpec> {
    let mut parts = value.rsplitn(3, ',');
    let (end, start, label) = match (parts.next(), parts.next(), parts.next()) {
        (Some(end), Some(start), Some(label)) => (end.trim(), start.trim(), label.trim()),
        _ => {
            return Err(bad(
                lineno,
                format!("`split` must be `label, start, end`, got `{value}`"),
            ))
        }
    };
    if label.is_empty() {
        return Err(bad(lineno, "`split` label must be nonempty".into()));
    }
    Ok(SplitSpec {
        label: label.to_string(),
        start: parse_date("split", start, lineno)?,
        end: parse_date("split", end, lineno)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_flags() -> CommonArgs {
        CommonArgs {
            config: None,
            data: None,
            model: None,
            window: None,
            latent_dim: None,
            long_only: false,
            seed: None,
            out: None,
        }
    }

    fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, text).unwrap();
        cfg.apply_file(&path).and_then(|()| cfg.validate()).map(|()| cfg)
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = from_text("window = 12\nwindoww = 9\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("unknown key `windoww`"), "{msg}");
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = from_text("# full-line comment\n\nwindow = 24  # trailing comment\n").unwrap();
        assert_eq!(cfg.window, 24);
    }

    #[test]
    fn split_labels_may_contain_commas() {
        let cfg =
            from_text("split = Crisis, recovery, 2008-06-30, 2013-06-28\n").unwrap();
        assert_eq!(cfg.splits.len(), 1);
        assert_eq!(cfg.splits[0].label, "Crisis, recovery");
        assert_eq!(cfg.splits[0].start, NaiveDate::from_ymd_opt(2008, 6, 30).unwrap());
        assert_eq!(cfg.splits[0].end, NaiveDate::from_ymd_opt(2013, 6, 28).unwrap());
    }

    #[test]
    fn backwards_split_is_rejected() {
        let err = from_text("split = Backwards, 2002-01-31, 2001-01-31\n").unwrap_err();
        assert!(err.to_string().contains("start"), "{err}");
    }

    #[test]
    fn fixed_nu_accepts_none_and_numbers() {
        assert_eq!(from_text("fixed_nu = none\n").unwrap().fixed_nu, None);
        assert_eq!(from_text("fixed_nu = 5.0\n").unwrap().fixed_nu, Some(5.0));
        assert!(from_text("fixed_nu = 1.5\n").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "seed = 1\nwindow = 60\nmodel = gplvm\n").unwrap();
        let mut args = no_flags();
        args.config = Some(path);
        args.seed = Some(2);
        args.model = Some("tplvm".into());
        let cfg = RunConfig::from_args(&args).unwrap();
        assert_eq!(cfg.seed, 2);
        assert_eq!(cfg.model, CovModel::Tplvm);
        assert_eq!(cfg.window, 60);
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }
}
