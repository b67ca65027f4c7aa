//! Rolling-window minimum-variance backtesting.
//!
//! At every observation index `t >= window` the engine looks back at rows
//! `[t - window, t)`, estimates a covariance matrix there (refitting the
//! model from scratch — no warm starts, so each rebalance is reproducible in
//! isolation), solves for minimum-variance weights and realizes `w' r_t`.
//! Nothing at index `t` or later ever enters the estimate, and each
//! rebalance derives its own fit seed from `(seed, t)`, so results are
//! deterministic and free of look-ahead by construction.

use chrono::NaiveDate;
use nalgebra::DVector;

use crate::data_io::ReturnsPanel;
use crate::error::{Error, Result};
use crate::folio::{
    covariance_from_lvm, min_variance_weights, normalize_exact, portfolio_metrics,
    predictive_covariance_from_lvm, sample_covariance, PeriodMetrics,
};
use crate::lvm::{self, LvmConfig, ModelKind};
use crate::seeds::derive_seed;

/// Covariance estimator driving the backtest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovModel {
    Gplvm,
    Tplvm,
    /// Rolling empirical covariance; the no-model baseline.
    SampleCov,
}

impl CovModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            CovModel::Gplvm => "gplvm",
            CovModel::Tplvm => "tplvm",
            CovModel::SampleCov => "samplecov",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gplvm" => Ok(CovModel::Gplvm),
            "tplvm" => Ok(CovModel::Tplvm),
            "samplecov" => Ok(CovModel::SampleCov),
            other => Err(Error::Input(format!(
                "unknown model `{other}` (expected gplvm, tplvm or samplecov)"
            ))),
        }
    }
}

/// Which covariance read-out the model-based estimators use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceMode {
    /// Kernel matrix at the fitted latents plus noise (the default).
    #[default]
    Fitted,
    /// Conditioned on the fitted window: the t model rescales by its
    /// quadratic form, inflating risk after turbulent windows.
    Predictive,
}

/// A labeled date range for per-period reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub label: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

/// Backtest settings.
#[derive(Debug, Clone)]
pub struct BacktestConfig {
    /// Look-back length in periods.
    pub window: usize,
    /// Refit cadence: 1 refits every period.
    pub rebalance_every: usize,
    pub model: CovModel,
    /// Latent-model settings (ignored for [`CovModel::SampleCov`]); its
    /// `model` and optimizer seed are overridden per rebalance.
    pub lvm: LvmConfig,
    pub long_only: bool,
    pub covariance: CovarianceMode,
    pub periods_per_year: u32,
    /// Master seed; each rebalance fits with a seed derived from it and the
    /// rebalance index.
    pub seed: u64,
    /// Reporting splits; metrics over the whole evaluation span are always
    /// produced in addition.
    pub splits: Vec<SplitSpec>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            window: 120,
            rebalance_every: 1,
            model: CovModel::SampleCov,
            lvm: LvmConfig::default(),
            long_only: false,
            covariance: CovarianceMode::Fitted,
            periods_per_year: 12,
            seed: 0,
            splits: Vec::new(),
        }
    }
}

/// What happened at one rebalance.
#[derive(Debug, Clone, PartialEq)]
pub struct RebalanceDiagnostics {
    /// Whether a refit was scheduled this period.
    pub refit: bool,
    /// Whether the scheduled refit failed and previous (or equal) weights
    /// were used instead.
    pub fallback: bool,
    /// The failure, when `fallback` is set.
    pub note: Option<String>,
    /// Fit objective, for model-based estimates.
    pub objective: Option<f64>,
    /// Fitted tail weight, for t-model estimates.
    pub nu: Option<f64>,
}

/// One realized period of the backtest.
#[derive(Debug, Clone, PartialEq)]
pub struct RebalanceRecord {
    /// Last date the weights could see (end of the look-back window).
    pub as_of: NaiveDate,
    /// Date whose return the weights realized.
    pub period_end: NaiveDate,
    /// Weights actually held over the period; always sum to one.
    pub weights: DVector<f64>,
    /// `w' r` for the period.
    pub realized_return: f64,
    pub diagnostics: RebalanceDiagnostics,
}

/// Metrics over one reporting split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub label: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Realized periods inside the split.
    pub periods: usize,
    pub metrics: PeriodMetrics,
}

/// Full backtest output.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub model: CovModel,
    pub window: usize,
    pub rebalance_every: usize,
    pub long_only: bool,
    pub periods_per_year: u32,
    pub seed: u64,
    pub assets: Vec<String>,
    pub rebalances: Vec<RebalanceRecord>,
    pub splits: Vec<SplitReport>,
    /// Metrics over every realized period.
    pub whole: PeriodMetrics,
    pub whole_periods: usize,
    /// First and last realized dates.
    pub span: (NaiveDate, NaiveDate),
}

fn validate_config(panel: &ReturnsPanel, config: &BacktestConfig) -> Result<()> {
    let d = panel.n_assets();
    let t = panel.n_periods();
    if config.window < d + 2 {
        return Err(Error::Input(format!(
            "window {} is too short for {d} assets; need at least {}",
            config.window,
            d + 2
        )));
    }
    if t < config.window + 2 {
        return Err(Error::Input(format!(
            "panel has {t} periods; need at least window + 2 = {}",
            config.window + 2
        )));
    }
    if config.rebalance_every == 0 {
        return Err(Error::Input("rebalance_every must be at least 1".into()));
    }
    if config.periods_per_year == 0 {
        return Err(Error::Input("periods_per_year must be positive".into()));
    }
    let first = panel.dates()[0];
    let last = panel.dates()[t - 1];
    for s in &config.splits {
        if s.label.trim().is_empty() {
            return Err(Error::Input("split labels must be nonempty".into()));
        }
        if s.start > s.end {
            return Err(Error::Input(format!(
                "split `{}` has start {} after end {}",
                s.label, s.start, s.end
            )));
        }
        if s.end < first || s.start > last {
            return Err(Error::Input(format!(
                "split `{}` ({} to {}) lies outside the data range ({} to {})",
                s.label, s.start, s.end, first, last
            )));
        }
    }
    Ok(())
}

/// Covariance estimate and weights for the window ending just before `t`.
fn weights_at(
    panel: &ReturnsPanel,
    config: &BacktestConfig,
    t: usize,
) -> Result<(DVector<f64>, Option<f64>, Option<f64>)> {
    let window = panel.window(t - config.window, t)?;
    let est = match config.model {
        CovModel::SampleCov => sample_covariance(&window)?,
        CovModel::Gplvm | CovModel::Tplvm => {
            // Kernel points are assets: transpose so each asset is a row
            // with one latent coordinate, observed over the window.
            let y = window.transpose();
            let mut lvm_config = config.lvm.clone();
            lvm_config.model = match config.model {
                CovModel::Gplvm => ModelKind::Gplvm,
                _ => ModelKind::Tplvm,
            };
            lvm_config.optimizer.seed = derive_seed(config.seed, t as u64);
            let fitted = lvm::fit(&y, &lvm_config)?;
            match config.covariance {
                CovarianceMode::Fitted => covariance_from_lvm(&fitted)?,
                CovarianceMode::Predictive => predictive_covariance_from_lvm(&fitted, &y)?,
            }
        }
    };
    let est = est.with_window(panel.dates()[t - config.window], panel.dates()[t - 1]);
    let objective = est.diagnostics.objective;
    let nu = est.diagnostics.nu;
    let pw = min_variance_weights(&est, config.long_only)?;
    Ok((pw.weights, objective, nu))
}

/// Runs the backtest; see the module docs for the protocol.
///
/// A failed refit never aborts the run: the period falls back to the
/// previous weights (equal weights if it is the very first rebalance), the
/// failure is recorded on the period's diagnostics, and the backtest
/// continues.
pub fn run_backtest(panel: &ReturnsPanel, config: &BacktestConfig) -> Result<BacktestReport> {
    validate_config(panel, config)?;
    let t_total = panel.n_periods();
    let d = panel.n_assets();
    let dates = panel.dates();

    let mut records: Vec<RebalanceRecord> = Vec::with_capacity(t_total - config.window);
    let mut current: Option<DVector<f64>> = None;
    for t in config.window..t_total {
        let due = (t - config.window) % config.rebalance_every == 0;
        let mut diag = RebalanceDiagnostics {
            refit: due,
            fallback: false,
            note: None,
            objective: None,
            nu: None,
        };
        if due {
            match weights_at(panel, config, t) {
                Ok((w, objective, nu)) => {
                    current = Some(w);
                    diag.objective = objective;
                    diag.nu = nu;
                }
                Err(e) => {
                    diag.fallback = true;
                    diag.note = Some(e.to_string().replace('\n', " "));
                    if current.is_none() {
                        let mut w = DVector::from_element(d, 1.0 / d as f64);
                        normalize_exact(&mut w);
                        current = Some(w);
                    }
                }
            }
        }
        let w = current.as_ref().expect("weights exist from the first rebalance on");
        let row = panel.values().row(t);
        let realized = (0..d).map(|j| w[j] * row[j]).sum();
        records.push(RebalanceRecord {
            as_of: dates[t - 1],
            period_end: dates[t],
            weights: w.clone(),
            realized_return: realized,
            diagnostics: diag,
        });
    }

    let all: Vec<f64> = records.iter().map(|r| r.realized_return).collect();
    let whole = portfolio_metrics(&all, config.periods_per_year)?;

    let mut splits = Vec::with_capacity(config.splits.len());
    for s in &config.splits {
        let selected: Vec<f64> = records
            .iter()
            .filter(|r| r.period_end >= s.start && r.period_end <= s.end)
            .map(|r| r.realized_return)
            .collect();
        if selected.len() < 2 {
            return Err(Error::Input(format!(
                "split `{}` ({} to {}) selects {} realized periods; metrics need at least 2",
                s.label,
                s.start,
                s.end,
                selected.len()
            )));
        }
        splits.push(SplitReport {
            label: s.label.clone(),
            start: s.start,
            end: s.end,
            periods: selected.len(),
            metrics: portfolio_metrics(&selected, config.periods_per_year)?,
        });
    }

    let span = (
        records.first().expect("at least two realized periods").period_end,
        records.last().expect("at least two realized periods").period_end,
    );
    Ok(BacktestReport {
        model: config.model,
        window: config.window,
        rebalance_every: config.rebalance_every,
        long_only: config.long_only,
        periods_per_year: config.periods_per_year,
        seed: config.seed,
        assets: panel.assets().to_vec(),
        rebalances: records,
        splits,
        whole,
        whole_periods: all.len(),
        span,
    })
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

/// Side-by-side metrics for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSection {
    pub label: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub periods: usize,
    pub a: PeriodMetrics,
    pub b: PeriodMetrics,
    /// `b - a`, metric by metric.
    pub diff_ret: f64,
    /// `b - a` for risk.
    pub diff_risk: f64,
    /// `b - a` for the ratio; absent if either side is undefined.
    pub diff_rr: Option<f64>,
}

/// Two backtests compared split by split.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub name_a: String,
    pub name_b: String,
    pub sections: Vec<ComparisonSection>,
}

fn section(
    label: &str,
    start: NaiveDate,
    end: NaiveDate,
    periods: usize,
    a: PeriodMetrics,
    b: PeriodMetrics,
) -> ComparisonSection {
    ComparisonSection {
        label: label.to_string(),
        start,
        end,
        periods,
        a,
        b,
        diff_ret: b.ret - a.ret,
        diff_risk: b.risk - a.risk,
        diff_rr: match (a.rr, b.rr) {
            (Some(x), Some(y)) => Some(y - x),
            _ => None,
        },
    }
}

/// Lines up two reports split by split (labels, ranges and period counts
/// must agree) and differences their metrics, second minus first.
pub fn compare_reports(a: &BacktestReport, b: &BacktestReport) -> Result<ComparisonTable> {
    if a.splits.len() != b.splits.len() {
        return Err(Error::Input(format!(
            "reports have {} and {} splits; comparison needs matching splits",
            a.splits.len(),
            b.splits.len()
        )));
    }
    if a.whole_periods != b.whole_periods || a.span != b.span {
        return Err(Error::Input(
            "reports cover different evaluation spans; comparison needs matching periods".into(),
        ));
    }
    let mut sections = Vec::with_capacity(a.splits.len() + 1);
    for (sa, sb) in a.splits.iter().zip(&b.splits) {
        if sa.label != sb.label || sa.start != sb.start || sa.end != sb.end {
            return Err(Error::Input(format!(
                "split `{}` ({} to {}) does not match split `{}` ({} to {})",
                sa.label, sa.start, sa.end, sb.label, sb.start, sb.end
            )));
        }
        if sa.periods != sb.periods {
            return Err(Error::Input(format!(
                "split `{}` covers {} periods in one report and {} in the other",
                sa.label, sa.periods, sb.periods
            )));
        }
        sections.push(section(&sa.label, sa.start, sa.end, sa.periods, sa.metrics, sb.metrics));
    }
    sections.push(section(
        "Whole period",
        a.span.0,
        a.span.1,
        a.whole_periods,
        a.whole,
        b.whole,
    ));
    Ok(ComparisonTable {
        name_a: a.model.as_str().to_string(),
        name_b: b.model.as_str().to_string(),
        sections,
    })
}

fn fmt_pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn fmt_rr(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "n/a".to_string(),
    }
}

impl ComparisonTable {
    /// Fixed-width text, one section per split plus the whole period:
    /// annualized return and risk in percent, then the return/risk ratio,
    /// with the difference column computed second-minus-first.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            out.push_str(&format!(
                "{} ({} to {}, {} periods)\n",
                s.label, s.start, s.end, s.periods
            ));
            out.push_str(&format!(
                "  {:<12}{:>10}{:>10}{:>12}\n",
                "Metric", self.name_a, self.name_b, "difference"
            ));
            out.push_str(&format!(
                "  {:<12}{:>10}{:>10}{:>12}\n",
                "Return [%]",
                fmt_pct(s.a.ret),
                fmt_pct(s.b.ret),
                fmt_pct(s.diff_ret)
            ));
            out.push_str(&format!(
                "  {:<12}{:>10}{:>10}{:>12}\n",
                "Risk [%]",
                fmt_pct(s.a.risk),
                fmt_pct(s.b.risk),
                fmt_pct(s.diff_risk)
            ));
            out.push_str(&format!(
                "  {:<12}{:>10}{:>10}{:>12}\n",
                "R/R",
                fmt_rr(s.a.rr),
                fmt_rr(s.b.rr),
                fmt_rr(s.diff_rr)
            ));
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl BacktestReport {
    /// Human-readable fixed-width summary table.
    pub fn to_table(&self) -> String {
        let constraint = if self.long_only { "long-only" } else { "unconstrained" };
        let fallbacks = self
            .rebalances
            .iter()
            .filter(|r| r.diagnostics.fallback)
            .count();
        let mut out = format!(
            "Minimum-variance backtest: model {}, window {}, refit every {}, {} weights\n",
            self.model.as_str(),
            self.window,
            self.rebalance_every,
            constraint
        );
        out.push_str(&format!(
            "Assets ({}): {}\n",
            self.assets.len(),
            self.assets.join(", ")
        ));
        out.push_str(&format!(
            "Realized periods: {} ({} to {}), fallbacks: {}\n\n",
            self.whole_periods, self.span.0, self.span.1, fallbacks
        ));
        out.push_str(&format!(
            "{:<18}{:>12}{:>12}{:>9}{:>13}{:>11}{:>8}\n",
            "Period", "Start", "End", "Periods", "Return [%]", "Risk [%]", "R/R"
        ));
        for s in &self.splits {
            out.push_str(&format!(
                "{:<18}{:>12}{:>12}{:>9}{:>13}{:>11}{:>8}\n",
                s.label,
                s.start.to_string(),
                s.end.to_string(),
                s.periods,
                fmt_pct(s.metrics.ret),
                fmt_pct(s.metrics.risk),
                fmt_rr(s.metrics.rr)
            ));
        }
        out.push_str(&format!(
            "{:<18}{:>12}{:>12}{:>9}{:>13}{:>11}{:>8}\n",
            "Whole period",
            self.span.0.to_string(),
            self.span.1.to_string(),
            self.whole_periods,
            fmt_pct(self.whole.ret),
            fmt_pct(self.whole.risk),
            fmt_rr(self.whole.rr)
        ));
        out
    }

    /// Machine-readable flat `key = value` document. Floats carry 17
    /// significant digits; a parse-and-reserialize round trip is
    /// byte-identical.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        out.push_str("report = backtest\n");
        out.push_str(&format!("model = {}\n", self.model.as_str()));
        out.push_str(&format!("window = {}\n", self.window));
        out.push_str(&format!("rebalance_every = {}\n", self.rebalance_every));
        out.push_str(&format!("long_only = {}\n", self.long_only));
        out.push_str(&format!("periods_per_year = {}\n", self.periods_per_year));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("assets = {}\n", self.assets.join(",")));
        out.push_str(&format!("rebalances = {}\n", self.rebalances.len()));
        for (i, r) in self.rebalances.iter().enumerate() {
            out.push_str(&format!("rebalance[{i}].as_of = {}\n", r.as_of));
            out.push_str(&format!("rebalance[{i}].period_end = {}\n", r.period_end));
            out.push_str(&format!(
                "rebalance[{i}].realized_return = {}\n",
                fmt_f64(r.realized_return)
            ));
            out.push_str(&format!("rebalance[{i}].refit = {}\n", r.diagnostics.refit));
            out.push_str(&format!(
                "rebalance[{i}].fallback = {}\n",
                r.diagnostics.fallback
            ));
            if let Some(note) = &r.diagnostics.note {
                out.push_str(&format!("rebalance[{i}].note = {note}\n"));
            }
            if let Some(obj) = r.diagnostics.objective {
                out.push_str(&format!("rebalance[{i}].objective = {}\n", fmt_f64(obj)));
            }
            if let Some(nu) = r.diagnostics.nu {
                out.push_str(&format!("rebalance[{i}].nu = {}\n", fmt_f64(nu)));
            }
            for j in 0..r.weights.len() {
                out.push_str(&format!(
                    "rebalance[{i}].weight[{j}] = {}\n",
                    fmt_f64(r.weights[j])
                ));
            }
        }
        out.push_str(&format!("splits = {}\n", self.splits.len()));
        for (i, s) in self.splits.iter().enumerate() {
            out.push_str(&format!("split[{i}].label = {}\n", s.label));
            out.push_str(&format!("split[{i}].start = {}\n", s.start));
            out.push_str(&format!("split[{i}].end = {}\n", s.end));
            out.push_str(&format!("split[{i}].periods = {}\n", s.periods));
            out.push_str(&format!("split[{i}].ret = {}\n", fmt_f64(s.metrics.ret)));
            out.push_str(&format!("split[{i}].risk = {}\n", fmt_f64(s.metrics.risk)));
            out.push_str(&format!("split[{i}].rr = {}\n", fmt_opt_f64(s.metrics.rr)));
        }
        out.push_str(&format!("whole.start = {}\n", self.span.0));
        out.push_str(&format!("whole.end = {}\n", self.span.1));
        out.push_str(&format!("whole.periods = {}\n", self.whole_periods));
        out.push_str(&format!("whole.ret = {}\n", fmt_f64(self.whole.ret)));
        out.push_str(&format!("whole.risk = {}\n", fmt_f64(self.whole.risk)));
        out.push_str(&format!("whole.rr = {}\n", fmt_opt_f64(self.whole.rr)));
        out
    }

    /// Parses a document written by [`to_document`](Self::to_document),
    /// rejecting unknown, duplicate or missing keys.
    pub fn from_document(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Document(format!("line {}: expected `key = value`", line_no + 1))
            })?;
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Document(format!("duplicate key `{key}`")));
            }
        }
        if take_key(&mut map, "report")? != "backtest" {
            return Err(Error::Document("not a backtest report document".into()));
        }
        let model = CovModel::parse(&take_key(&mut map, "model")?)
            .map_err(|e| Error::Document(e.to_string()))?;
        let window = parse_usize("window", &take_key(&mut map, "window")?)?;
        let rebalance_every =
            parse_usize("rebalance_every", &take_key(&mut map, "rebalance_every")?)?;
        let long_only = parse_bool("long_only", &take_key(&mut map, "long_only")?)?;
        let periods_per_year =
            parse_usize("periods_per_year", &take_key(&mut map, "periods_per_year")?)? as u32;
        let seed: u64 = take_key(&mut map, "seed")?
            .parse()
            .map_err(|_| Error::Document("`seed` must be an integer".into()))?;
        let assets: Vec<String> = take_key(&mut map, "assets")?
            .split(',')
            .map(str::to_string)
            .collect();
        if assets.is_empty() || assets.iter().any(|a| a.is_empty()) {
            return Err(Error::Document("`assets` must name every column".into()));
        }

        let n_reb = parse_usize("rebalances", &take_key(&mut map, "rebalances")?)?;
        let mut rebalances = Vec::with_capacity(n_reb);
        for i in 0..n_reb {
            let as_of = parse_date(
                "as_of",
                &take_key(&mut map, &format!("rebalance[{i}].as_of"))?,
            )?;
            let period_end = parse_date(
                "period_end",
                &take_key(&mut map, &format!("rebalance[{i}].period_end"))?,
            )?;
            let realized_return = parse_f64(
                "realized_return",
                &take_key(&mut map, &format!("rebalance[{i}].realized_return"))?,
            )?;
            let refit = parse_bool("refit", &take_key(&mut map, &format!("rebalance[{i}].refit"))?)?;
            let fallback = parse_bool(
                "fallback",
                &take_key(&mut map, &format!("rebalance[{i}].fallback"))?,
            )?;
            let note = map.remove(&format!("rebalance[{i}].note"));
            let objective = map
                .remove(&format!("rebalance[{i}].objective"))
                .map(|v| parse_f64("objective", &v))
                .transpose()?;
            let nu = map
                .remove(&format!("rebalance[{i}].nu"))
                .map(|v| parse_f64("nu", &v))
                .transpose()?;
            let mut weights = Vec::with_capacity(assets.len());
            for j in 0..assets.len() {
                let k = format!("rebalance[{i}].weight[{j}]");
                let v = take_key(&mut map, &k)?;
                weights.push(parse_f64(&k, &v)?);
            }
            rebalances.push(RebalanceRecord {
                as_of,
                period_end,
                weights: DVector::from_vec(weights),
                realized_return,
                diagnostics: RebalanceDiagnostics { refit, fallback, note, objective, nu },
            });
        }

        let n_splits = parse_usize("splits", &take_key(&mut map, "splits")?)?;
        let mut splits = Vec::with_capacity(n_splits);
        for i in 0..n_splits {
            splits.push(SplitReport {
                label: take_key(&mut map, &format!("split[{i}].label"))?,
                start: parse_date("start", &take_key(&mut map, &format!("split[{i}].start"))?)?,
                end: parse_date("end", &take_key(&mut map, &format!("split[{i}].end"))?)?,
                periods: parse_usize(
                    "periods",
                    &take_key(&mut map, &format!("split[{i}].periods"))?,
                )?,
                metrics: PeriodMetrics {
                    ret: parse_f64("ret", &take_key(&mut map, &format!("split[{i}].ret"))?)?,
                    risk: parse_f64("risk", &take_key(&mut map, &format!("split[{i}].risk"))?)?,
                    rr: parse_opt_f64("rr", &take_key(&mut map, &format!("split[{i}].rr"))?)?,
                },
            });
        }

        let span = (
            parse_date("whole.start", &take_key(&mut map, "whole.start")?)?,
            parse_date("whole.end", &take_key(&mut map, "whole.end")?)?,
        );
        let whole_periods = parse_usize("whole.periods", &take_key(&mut map, "whole.periods")?)?;
        let whole = PeriodMetrics {
            ret: parse_f64("whole.ret", &take_key(&mut map, "whole.ret")?)?,
            risk: parse_f64("whole.risk", &take_key(&mut map, "whole.risk")?)?,
            rr: parse_opt_f64("whole.rr", &take_key(&mut map, "whole.rr")?)?,
        };

        if let Some(stray) = map.keys().next() {
            return Err(Error::Document(format!("unknown key `{stray}`")));
        }
        Ok(Self {
            model,
            window,
            rebalance_every,
            long_only,
            periods_per_year,
            seed,
            assets,
            rebalances,
            splits,
            whole,
            whole_periods,
            span,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_document())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_document(&text)
    }
}

fn take_key(map: &mut std::collections::BTreeMap<String, String>, k: &str) -> Result<String> {
    map.remove(k)
        .ok_or_else(|| Error::Document(format!("missing key `{k}`")))
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    match v {
        Some(v) => fmt_f64(v),
        None => "undefined".to_string(),
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::Document(format!("key `{key}` has non-numeric value `{v}`")))
}

fn parse_opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "undefined" {
        Ok(None)
    } else {
        parse_f64(key, v).map(Some)
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::Document(format!("key `{key}` must be a nonnegative integer, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Document(format!("key `{key}` must be a bool, got `{v}`"))),
    }
}

fn parse_date(key: &str, v: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(v, "%Y-%m-%d")
        .map_err(|_| Error::Document(format!("key `{key}` has invalid date `{v}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{make_synthetic, Generator, SyntheticSpec};
    use approx::assert_relative_eq;
    use chrono::NaiveDate;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn small_panel(seed: u64) -> crate::data_io::ReturnsPanel {
        make_synthetic(&SyntheticSpec {
            n_assets: 3,
            n_periods: 30,
            generator: Generator::GaussianFactor,
            seed,
            ..Default::default()
        })
        .unwrap()
        .panel
    }

    fn samplecov_config(window: usize) -> BacktestConfig {
        BacktestConfig { window, ..Default::default() }
    }

    #[test]
    fn samplecov_backtest_covers_expected_periods() {
        let panel = small_panel(1);
        let report = run_backtest(&panel, &samplecov_config(10)).unwrap();
        assert_eq!(report.whole_periods, 20);
        assert_eq!(report.rebalances.len(), 20);
        assert_eq!(report.span.0, panel.dates()[10]);
        assert_eq!(report.span.1, panel.dates()[29]);
        // Every period's weights sum exactly to one.
        for r in &report.rebalances {
            let sum: f64 = r.weights.iter().sum();
            assert_eq!(sum, 1.0);
            assert!(!r.diagnostics.fallback);
        }
    }

    #[test]
    fn realized_returns_match_hand_computation() {
        let panel = small_panel(2);
        let config = samplecov_config(10);
        let report = run_backtest(&panel, &config).unwrap();
        // Recompute the first period by hand.
        let w0 = &report.rebalances[0].weights;
        let row = panel.values().row(10);
        let expect: f64 = (0..3).map(|j| w0[j] * row[j]).sum();
        assert_relative_eq!(report.rebalances[0].realized_return, expect, epsilon = 0.0);
    }

    #[test]
    fn window_too_short_rejected() {
        let panel = small_panel(3);
        let mut config = samplecov_config(4); // 3 assets need >= 5
        assert!(run_backtest(&panel, &config).is_err());
        config.window = 29; // leaves only one realized period
        assert!(run_backtest(&panel, &config).is_err());
    }

    #[test]
    fn split_selection_and_empty_split_rejection() {
        let panel = small_panel(4);
        let mut config = samplecov_config(10);
        let dates = panel.dates();
        config.splits = vec![SplitSpec {
            label: "Front".into(),
            start: dates[10],
            end: dates[19],
        }];
        let report = run_backtest(&panel, &config).unwrap();
        assert_eq!(report.splits[0].periods, 10);

        // A split covering a single realized period cannot produce metrics.
        config.splits = vec![SplitSpec {
            label: "Tiny".into(),
            start: dates[10],
            end: dates[10],
        }];
        let err = run_backtest(&panel, &config).unwrap_err();
        assert!(matches!(err, Error::Input(_)));

        // A split outside the data range is a validation error.
        config.splits = vec![SplitSpec {
            label: "Out".into(),
            start: date(1990, 1, 1),
            end: date(1990, 12, 31),
        }];
        assert!(run_backtest(&panel, &config).is_err());
    }

    #[test]
    fn rebalance_cadence_carries_weights_forward() {
        let panel = small_panel(5);
        let mut config = samplecov_config(10);
        config.rebalance_every = 5;
        let report = run_backtest(&panel, &config).unwrap();
        for (k, r) in report.rebalances.iter().enumerate() {
            assert_eq!(r.diagnostics.refit, k % 5 == 0, "period {k}");
        }
        // Weights are constant between refits.
        assert_eq!(report.rebalances[1].weights, report.rebalances[0].weights);
        assert_ne!(report.rebalances[5].weights, report.rebalances[4].weights);
    }

    #[test]
    fn backtest_is_deterministic() {
        let panel = small_panel(6);
        let config = samplecov_config(10);
        let a = run_backtest(&panel, &config).unwrap();
        let b = run_backtest(&panel, &config).unwrap();
        assert_eq!(a.to_document(), b.to_document());
    }

    #[test]
    fn no_look_ahead_in_sample_covariance_weights() {
        // Perturbing observations at index >= t must leave weights realized
        // at periods <= t unchanged.
        let panel = small_panel(7);
        let config = samplecov_config(10);
        let base = run_backtest(&panel, &config).unwrap();

        let mut values = panel.values().clone();
        for j in 0..values.ncols() {
            values[(20, j)] += 0.05;
        }
        let bumped = crate::data_io::ReturnsPanel::new(
            panel.dates().to_vec(),
            panel.assets().to_vec(),
            values,
        )
        .unwrap();
        let shifted = run_backtest(&bumped, &config).unwrap();
        // Periods realized strictly before index 20 are untouched.
        for k in 0..10 {
            assert_eq!(base.rebalances[k].weights, shifted.rebalances[k].weights);
            assert_eq!(
                base.rebalances[k].realized_return.to_bits(),
                shifted.rebalances[k].realized_return.to_bits()
            );
        }
        // The weights held over period 20 were formed before seeing it.
        assert_eq!(base.rebalances[10].weights, shifted.rebalances[10].weights);
    }

    #[test]
    fn report_document_round_trips_byte_identically() {
        let panel = small_panel(8);
        let mut config = samplecov_config(10);
        let dates = panel.dates();
        config.splits = vec![
            SplitSpec { label: "Anterior half".into(), start: dates[10], end: dates[19] },
            SplitSpec { label: "Posterior half".into(), start: dates[20], end: dates[29] },
        ];
        let report = run_backtest(&panel, &config).unwrap();
        let doc = report.to_document();
        let parsed = BacktestReport::from_document(&doc).unwrap();
        assert_eq!(parsed, report);
        assert_eq!(parsed.to_document(), doc);
    }

    #[test]
    fn report_document_rejects_unknown_keys() {
        let panel = small_panel(9);
        let report = run_backtest(&panel, &samplecov_config(10)).unwrap();
        let doc = format!("{}mystery = 1\n", report.to_document());
        assert!(matches!(
            BacktestReport::from_document(&doc),
            Err(Error::Document(_))
        ));
    }

    fn metrics(ret: f64, risk: f64) -> PeriodMetrics {
        PeriodMetrics { ret, risk, rr: Some(ret / risk) }
    }

    fn toy_report(model: CovModel, splits: Vec<SplitReport>, whole: PeriodMetrics) -> BacktestReport {
        BacktestReport {
            model,
            window: 120,
            rebalance_every: 1,
            long_only: false,
            periods_per_year: 12,
            seed: 0,
            assets: vec!["A".into(), "B".into()],
            rebalances: Vec::new(),
            splits,
            whole,
            whole_periods: 120,
            span: (date(2010, 1, 29), date(2019, 12, 31)),
        }
    }

    #[test]
    fn comparison_is_antisymmetric() {
        let sa = SplitReport {
            label: "Anterior half".into(),
            start: date(2010, 1, 29),
            end: date(2014, 12, 31),
            periods: 60,
            metrics: metrics(0.0064, 0.1592),
        };
        let sb = SplitReport { metrics: metrics(0.0187, 0.1493), ..sa.clone() };
        let a = toy_report(CovModel::Gplvm, vec![sa.clone()], metrics(0.0125, 0.1540));
        let b = toy_report(CovModel::Tplvm, vec![sb], metrics(0.0150, 0.1470));
        let ab = compare_reports(&a, &b).unwrap();
        let ba = compare_reports(&b, &a).unwrap();
        for (x, y) in ab.sections.iter().zip(&ba.sections) {
            assert_relative_eq!(x.diff_ret, -y.diff_ret, epsilon = 1e-18);
            assert_relative_eq!(x.diff_risk, -y.diff_risk, epsilon = 1e-18);
            assert_relative_eq!(x.diff_rr.unwrap(), -y.diff_rr.unwrap(), epsilon = 1e-18);
        }
    }

    #[test]
    fn comparison_rejects_mismatched_splits() {
        let sa = SplitReport {
            label: "Anterior half".into(),
            start: date(2010, 1, 29),
            end: date(2014, 12, 31),
            periods: 60,
            metrics: metrics(0.0064, 0.1592),
        };
        let a = toy_report(CovModel::Gplvm, vec![sa.clone()], metrics(0.0125, 0.1540));
        let b = toy_report(CovModel::Tplvm, vec![], metrics(0.0150, 0.1470));
        assert!(compare_reports(&a, &b).is_err());
    }

    #[test]
    fn comparison_table_renders_expected_rows() {
        // Values chosen so the rendered percentages are two-decimal exact.
        let sa = SplitReport {
            label: "Anterior half".into(),
            start: date(2010, 1, 29),
            end: date(2014, 12, 31),
            periods: 60,
            metrics: PeriodMetrics { ret: 0.0064, risk: 0.1592, rr: Some(0.04) },
        };
        let sb = SplitReport {
            metrics: PeriodMetrics { ret: 0.0187, risk: 0.1493, rr: Some(0.13) },
            ..sa.clone()
        };
        let a = toy_report(CovModel::Gplvm, vec![sa], metrics(0.0125, 0.1540));
        let b = toy_report(CovModel::Tplvm, vec![sb], metrics(0.0150, 0.1470));
        let table = compare_reports(&a, &b).unwrap().to_table();

        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "Anterior half (2010-01-29 to 2014-12-31, 60 periods)");
        assert_eq!(lines[1], "  Metric           gplvm     tplvm  difference");
        assert_eq!(lines[2], "  Return [%]        0.64      1.87        1.23");
        assert_eq!(lines[3], "  Risk [%]         15.92     14.93       -0.99");
        assert_eq!(lines[4], "  R/R               0.04      0.13        0.09");
        assert!(table.contains("Whole period"));
    }

    #[test]
    fn report_table_lists_whole_period_row() {
        let panel = small_panel(10);
        let report = run_backtest(&panel, &samplecov_config(10)).unwrap();
        let table = report.to_table();
        assert!(table.contains("Whole period"));
        assert!(table.contains("Return [%]"));
        assert!(table.contains("samplecov"));
    }
}
