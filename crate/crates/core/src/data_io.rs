//! Panel loading, validation and synthetic data generation.
//!
//! Panels are delimited text: a `date,ASSET1,ASSET2,...` header, then one
//! ISO-8601 date plus one decimal value per asset on each row, dates strictly
//! increasing. Files may hold returns directly or prices, which are turned
//! into simple returns `r_t = p_t / p_{t-1} - 1` (the first row is consumed).

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use thiserror::Error;

use crate::error::{Error as CrateError, Result};
use crate::kernels::KernelSpec;
use crate::seeds::derive_seed;
use crate::tprocess::{MvGaussian, MvStudentT};

/// Malformed panel input, with enough position information to fix the file.
/// Rows are 1-based file lines (the header is line 1); columns are 1-based
/// field positions.
#[derive(Debug, Error)]
pub enum PanelError {
    #[error("panel is empty")]
    Empty,

    #[error("header must start with a `date` column, got `{found}`")]
    BadHeader { found: String },

    #[error("header names no asset columns")]
    NoAssets,

    #[error("header repeats asset name `{name}`")]
    DuplicateAsset { name: String },

    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },

    #[error("row {row}: cannot parse date `{value}` (expected YYYY-MM-DD)")]
    BadDate { row: usize, value: String },

    #[error("row {row}: date {date} repeats the previous row's date")]
    DuplicateDate { row: usize, date: NaiveDate },

    #[error("row {row}: date {date} is not after the previous row's {previous}")]
    NonMonotoneDate { row: usize, date: NaiveDate, previous: NaiveDate },

    #[error("row {row}, column {col}: missing value")]
    MissingCell { row: usize, col: usize },

    #[error("row {row}, column {col}: cannot parse number `{value}`")]
    BadNumber { row: usize, col: usize, value: String },

    #[error("row {row}, column {col}: value is not finite")]
    NonFinite { row: usize, col: usize },

    #[error("row {row}, column {col}: price {value} must be positive to form returns")]
    NonPositivePrice { row: usize, col: usize, value: f64 },

    #[error("panel needs at least {needed} data rows, found {found}")]
    TooFewRows { needed: usize, found: usize },
}

/// Whether a file holds returns or prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelKind {
    Returns,
    Prices,
}

/// A dense panel of simple returns: `T` dated rows by `D` named assets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    /// `T x D`, row `t` is the cross-section of returns at `dates[t]`.
    values: DMatrix<f64>,
}

impl ReturnsPanel {
    /// Builds a panel from parts, validating shape, finiteness and strictly
    /// increasing dates.
    pub fn new(dates: Vec<NaiveDate>, assets: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if assets.is_empty() {
            return Err(PanelError::NoAssets.into());
        }
        if dates.is_empty() {
            return Err(PanelError::Empty.into());
        }
        if values.nrows() != dates.len() || values.ncols() != assets.len() {
            return Err(CrateError::Input(format!(
                "values are {}x{} but there are {} dates and {} assets",
                values.nrows(),
                values.ncols(),
                dates.len(),
                assets.len()
            )));
        }
        for (i, name) in assets.iter().enumerate() {
            if assets[..i].contains(name) {
                return Err(PanelError::DuplicateAsset { name: name.clone() }.into());
            }
        }
        for w in dates.windows(2) {
            if w[1] <= w[0] {
                return Err(CrateError::Input(format!(
                    "dates must be strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CrateError::Input("returns must be finite".into()));
        }
        Ok(Self { dates, assets, values })
    }

    pub fn n_periods(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// The `[start, end)` window of rows as an owned matrix.
    pub fn window(&self, start: usize, end: usize) -> Result<DMatrix<f64>> {
        if start >= end || end > self.n_periods() {
            return Err(CrateError::Input(format!(
                "window [{start}, {end}) is out of range for {} periods",
                self.n_periods()
            )));
        }
        Ok(self.values.rows(start, end - start).into_owned())
    }

    /// Serializes back to the delimited text format. Values print with 17
    /// significant digits, so a round trip is lossless.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date");
        for a in &self.assets {
            out.push(',');
            out.push_str(a);
        }
        out.push('\n');
        for (t, date) in self.dates.iter().enumerate() {
            out.push_str(&date.format("%Y-%m-%d").to_string());
            for j in 0..self.n_assets() {
                out.push_str(&format!(",{:.16e}", self.values[(t, j)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Parses delimited panel text; see the module docs for the format.
///
/// With [`PanelKind::Prices`] the values are converted to simple returns and
/// the first dated row drops out. Every malformed cell is reported with its
/// row and column.
pub fn parse_panel(text: &str, kind: PanelKind) -> Result<ReturnsPanel> {
    let mut lines = text.lines().enumerate();
    let (_, header) = loop {
        match lines.next() {
            Some((i, l)) if !l.trim().is_empty() => break (i, l),
            Some(_) => continue,
            None => return Err(PanelError::Empty.into()),
        }
    };
    let header_fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if header_fields[0] != "date" {
        return Err(PanelError::BadHeader { found: header_fields[0].to_string() }.into());
    }
    if header_fields.len() < 2 {
        return Err(PanelError::NoAssets.into());
    }
    let assets: Vec<String> = header_fields[1..].iter().map(|s| s.to_string()).collect();
    for (i, name) in assets.iter().enumerate() {
        if name.is_empty() {
            return Err(PanelError::BadHeader { found: header.to_string() }.into());
        }
        if assets[..i].contains(name) {
            return Err(PanelError::DuplicateAsset { name: name.clone() }.into());
        }
    }
    let expected = header_fields.len();

    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        let row_no = idx + 1; // 1-based file line
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != expected {
            return Err(PanelError::RaggedRow {
                row: row_no,
                expected,
                found: fields.len(),
            }
            .into());
        }
        let date = NaiveDate::parse_from_str(fields[0], "%Y-%m-%d").map_err(|_| {
            PanelError::BadDate { row: row_no, value: fields[0].to_string() }
        })?;
        if let Some(prev) = dates.last() {
            if date == *prev {
                return Err(PanelError::DuplicateDate { row: row_no, date }.into());
            }
            if date < *prev {
                return Err(PanelError::NonMonotoneDate {
                    row: row_no,
                    date,
                    previous: *prev,
                }
                .into());
            }
        }
        let mut row = Vec::with_capacity(assets.len());
        for (j, field) in fields[1..].iter().enumerate() {
            let col = j + 2; // 1-based, after the date column
            if field.is_empty() {
                return Err(PanelError::MissingCell { row: row_no, col }.into());
            }
            let v: f64 = field.parse().map_err(|_| PanelError::BadNumber {
                row: row_no,
                col,
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(PanelError::NonFinite { row: row_no, col }.into());
            }
            if kind == PanelKind::Prices && v <= 0.0 {
                return Err(PanelError::NonPositivePrice { row: row_no, col, value: v }.into());
            }
            row.push(v);
        }
        dates.push(date);
        rows.push(row);
    }

    match kind {
        PanelKind::Returns => {
            if rows.is_empty() {
                return Err(PanelError::TooFewRows { needed: 1, found: 0 }.into());
            }
        }
        PanelKind::Prices => {
            if rows.len() < 2 {
                return Err(PanelError::TooFewRows { needed: 2, found: rows.len() }.into());
            }
            let mut ret_rows = Vec::with_capacity(rows.len() - 1);
            for t in 1..rows.len() {
                let row: Vec<f64> = rows[t]
                    .iter()
                    .zip(&rows[t - 1])
                    .map(|(p, prev)| p / prev - 1.0)
                    .collect();
                ret_rows.push(row);
            }
            rows = ret_rows;
            dates.remove(0);
        }
    }

    let t = rows.len();
    let d = assets.len();
    let values = DMatrix::from_fn(t, d, |i, j| rows[i][j]);
    ReturnsPanel::new(dates, assets, values)
}

/// Loads a panel file; see [`parse_panel`].
pub fn load_panel(path: &std::path::Path, kind: PanelKind) -> Result<ReturnsPanel> {
    let text = std::fs::read_to_string(path)?;
    parse_panel(&text, kind)
}

/// Distribution the synthetic factor panel draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// Gaussian returns with the kernel-implied covariance.
    GaussianFactor,
    /// Student's t returns with the same covariance and `nu` tail weight.
    TFactor,
}

/// Configuration of a synthetic panel.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_assets: usize,
    pub n_periods: usize,
    pub generator: Generator,
    /// Tail weight for [`Generator::TFactor`] (ignored otherwise).
    pub nu: f64,
    /// Latent dimension of the ground-truth coordinates.
    pub q_true: usize,
    /// Kernel producing the ground-truth covariance.
    pub kernel: KernelSpec,
    pub seed: u64,
    /// First observation date; subsequent rows land on successive month ends.
    pub start: NaiveDate,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_assets: 16,
            n_periods: 240,
            generator: Generator::GaussianFactor,
            nu: 5.0,
            q_true: 1,
            kernel: KernelSpec::exponential(0.0025, 1.0)
                .expect("valid default kernel")
                .with_noise_var(0.0004)
                .expect("valid default noise"),
            seed: 0,
            start: NaiveDate::from_ymd_opt(2000, 1, 31).expect("valid date"),
        }
    }
}

/// A synthetic panel along with the ground truth that generated it.
#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub panel: ReturnsPanel,
    /// True covariance the draws came from (kernel + noise).
    pub truth: DMatrix<f64>,
    /// Latent coordinates behind the covariance (`n_assets x q_true`).
    pub latents: DMatrix<f64>,
}

const STREAM_SYNTH_LATENTS: u64 = 0x5717_0001;
const STREAM_SYNTH_DRAWS: u64 = 0x5717_0002;

/// Month-end dates starting at `start`'s month.
pub fn month_ends(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let (mut year, mut month) = (start.year(), start.month());
    for _ in 0..count {
        let (ny, nm) = if month == 12 { (year + 1, 1) } else { (year, month + 1) };
        let eom = NaiveDate::from_ymd_opt(ny, nm, 1)
            .expect("valid first of month")
            .pred_opt()
            .expect("month end exists");
        out.push(eom);
        year = ny;
        month = nm;
    }
    out
}

/// Draws a synthetic return panel from a latent factor model.
///
/// Latent coordinates are standard normal; the ground-truth covariance is the
/// kernel matrix at those coordinates plus observation noise; rows are
/// independent draws from the chosen distribution. Deterministic in
/// `spec.seed`, and the truth matrix is returned alongside the panel.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticPanel> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    if spec.n_assets == 0 {
        return Err(CrateError::Input("need at least one asset".into()));
    }
    if spec.n_periods < 2 {
        return Err(CrateError::Input("need at least two periods".into()));
    }
    if spec.q_true == 0 {
        return Err(CrateError::Input("ground-truth latent dimension must be positive".into()));
    }
    if spec.generator == Generator::TFactor && !(spec.nu > 2.0) {
        return Err(CrateError::Input(format!(
            "t generator needs nu > 2, got {}",
            spec.nu
        )));
    }

    let mut latent_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_SYNTH_LATENTS));
    let latents = DMatrix::from_fn(spec.n_assets, spec.q_true, |_, _| {
        latent_rng.sample::<f64, _>(StandardNormal)
    });

    let km = spec.kernel.matrix(&latents, true)?;
    let truth = km.values().clone();
    let mean = nalgebra::DVector::zeros(spec.n_assets);
    let draw_seed = derive_seed(spec.seed, STREAM_SYNTH_DRAWS);
    let values = match spec.generator {
        Generator::GaussianFactor => {
            MvGaussian::new(mean, truth.clone())?.sample(spec.n_periods, draw_seed)
        }
        Generator::TFactor => {
            MvStudentT::new(mean, truth.clone(), spec.nu)?.sample(spec.n_periods, draw_seed)
        }
    };

    let dates = month_ends(spec.start, spec.n_periods);
    let assets = (1..=spec.n_assets).map(|i| format!("A{i:02}")).collect();
    let panel = ReturnsPanel::new(dates, assets, values)?;
    Ok(SyntheticPanel { panel, truth, latents })
}

/// Writes a covariance matrix in the panel's delimited format: an
/// `asset,<names...>` header, then one named row per asset.
pub fn covariance_to_csv(names: &[String], sigma: &DMatrix<f64>) -> Result<String> {
    if sigma.nrows() != names.len() || sigma.ncols() != names.len() {
        return Err(CrateError::Input(format!(
            "covariance is {}x{} but there are {} names",
            sigma.nrows(),
            sigma.ncols(),
            names.len()
        )));
    }
    let mut out = String::from("asset");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for i in 0..names.len() {
        out.push_str(&names[i]);
        for j in 0..names.len() {
            out.push_str(&format!(",{:.16e}", sigma[(i, j)]));
        }
        out.push('\n');
    }
    Ok(out)
}
