//! The five subcommands. Each loads its inputs, computes everything in
//! memory, and only then creates the output directory and writes its files,
//! so a failing run leaves nothing behind. File contents depend only on the
//! inputs and the seed; reruns are byte-identical.

use std::path::{Path, PathBuf};

use tpfolio_core::backtest::{compare_reports, run_backtest, BacktestReport, CovModel, SplitSpec};
use tpfolio_core::data_io::{
    covariance_to_csv, load_panel, make_synthetic, Generator, ReturnsPanel, SyntheticSpec,
};
use tpfolio_core::folio::{summary_stats, SummaryStats};
use tpfolio_core::lvm::{fit_mle, fit_variational, ElboEstimate, FittedLvm, Inference, ModelKind};
use tpfolio_core::seeds::derive_seed;
use tpfolio_core::{Error, Result};

use crate::config::{annotate_io, RunConfig};

/// Stream tag separating the one-shot `fit` from every other seeded stage.
const STREAM_CLI_FIT: u64 = 0xC11_0001;
/// Stream tag for the fresh-draw bound re-estimate `fit` reports.
const STREAM_CLI_ELBO: u64 = 0xC11_0002;

/// Writes a synthetic return panel and its ground-truth covariance.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let spec = SyntheticSpec {
        n_assets: cfg.assets,
        n_periods: cfg.periods,
        generator: cfg.generator,
        nu: cfg.nu,
        q_true: cfg.q_true,
        seed: cfg.seed,
        start: cfg.start,
        ..SyntheticSpec::default()
    };
    let synth = make_synthetic(&spec)?;
    let truth_csv = covariance_to_csv(synth.panel.assets(), &synth.truth)?;

    let out = ensure_out(&cfg.out)?;
    let panel_path = out.join("panel.csv");
    let truth_path = out.join("truth_cov.csv");
    synth.panel.write_csv(&panel_path)?;
    std::fs::write(&truth_path, truth_csv)?;

    let generator = match cfg.generator {
        Generator::GaussianFactor => "gaussian factor".to_string(),
        Generator::TFactor => format!("t factor, nu = {}", cfg.nu),
    };
    println!(
        "simulated {} assets x {} periods ({}, seed {})",
        cfg.assets, cfg.periods, generator, cfg.seed
    );
    println!("wrote {}", panel_path.display());
    println!("wrote {}", truth_path.display());
    Ok(())
}

/// Fits one latent model to the whole panel and writes the model document,
/// the objective trace, and a `key = value` summary.
pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let panel = load_data(cfg)?;
    let kind = match cfg.model {
        CovModel::Gplvm => ModelKind::Gplvm,
        CovModel::Tplvm => ModelKind::Tplvm,
        CovModel::SampleCov => {
            return Err(Error::Input(
                "fit needs a latent model; pass --model gplvm or --model tplvm".into(),
            ))
        }
    };
    // Assets are the kernel points: one latent coordinate per asset, one
    // output column per period.
    let y = panel.values().transpose();
    let lvm = cfg.lvm_config(kind, derive_seed(cfg.seed, STREAM_CLI_FIT));

    let (model, bounds) = match cfg.inference {
        Inference::Mle => (fit_mle(&y, &lvm)?, None),
        Inference::Variational => {
            let vfit = fit_variational(&y, &lvm)?;
            // The optimizer's own bound estimate reuses its fitted draws and
            // is slightly optimistic; report a fresh-draw estimate alongside.
            let fresh =
                vfit.reevaluate_elbo(&y, cfg.mc_samples, derive_seed(cfg.seed, STREAM_CLI_ELBO))?;
            (vfit.model, Some((vfit.elbo, fresh)))
        }
    };
    let loglik = model.loglik(&y)?;
    let summary = fit_summary(cfg, &panel, &model, loglik, &bounds);
    let mut trace = String::with_capacity(model.objective_trace.len() * 26);
    for v in &model.objective_trace {
        trace.push_str(&format!("{v:.16e}\n"));
    }

    let name = kind.as_str();
    let out = ensure_out(&cfg.out)?;
    let model_path = out.join(format!("model_{name}.txt"));
    let trace_path = out.join(format!("fit_trace_{name}.txt"));
    let summary_path = out.join(format!("fit_summary_{name}.txt"));
    model.save(&model_path)?;
    std::fs::write(&trace_path, trace)?;
    std::fs::write(&summary_path, &summary)?;

    print!("{summary}");
    for p in [&model_path, &trace_path, &summary_path] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn fit_summary(
    cfg: &RunConfig,
    panel: &ReturnsPanel,
    model: &FittedLvm,
    loglik: f64,
    bounds: &Option<(ElboEstimate, ElboEstimate)>,
) -> String {
    let mut s = format!(
        "Latent model fit: {}, {} assets x {} periods\n",
        model.model.as_str(),
        panel.n_assets(),
        panel.n_periods()
    );
    s.push_str(&format!("latent_dim = {}\n", model.latent_dim()));
    s.push_str(&format!("theta1 = {:.16e}\n", model.kernel.theta1()));
    s.push_str(&format!("theta2 = {:.16e}\n", model.kernel.theta2()));
    s.push_str(&format!("noise_var = {:.16e}\n", model.kernel.noise_var()));
    match model.nu {
        Some(nu) => s.push_str(&format!("nu = {nu:.16e}\n")),
        None => s.push_str("nu = n/a\n"),
    }
    s.push_str(&format!("objective = {:.16e}\n", model.objective()));
    s.push_str(&format!("loglik = {loglik:.16e}\n"));
    if let Some((fit, fresh)) = bounds {
        s.push_str(&format!(
            "elbo_fit = {:.16e} (std error {:.3e}, {} reused draws)\n",
            fit.value, fit.std_error, fit.mc_samples
        ));
        s.push_str(&format!(
            "elbo_fresh = {:.16e} (std error {:.3e}, {} fresh draws)\n",
            fresh.value, fresh.std_error, fresh.mc_samples
        ));
    }
    s.push_str(&format!("converged = {}\n", model.converged));
    s.push_str(&format!("restarts_used = {}\n", model.restarts_used));
    let inference = match cfg.inference {
        Inference::Mle => "mle",
        Inference::Variational => "variational",
    };
    s.push_str(&format!("inference = {inference}\n"));
    s.push_str(&format!("seed = {}\n", cfg.seed));
    s
}

/// Rolls the backtest and writes the report document plus its summary table.
pub fn cmd_backtest(cfg: &RunConfig) -> Result<()> {
    let panel = load_data(cfg)?;
    let splits = if cfg.splits.is_empty() {
        default_halves(&panel, cfg.window)?
    } else {
        cfg.splits.clone()
    };
    let bt = cfg.backtest_config(splits);
    let report = run_backtest(&panel, &bt)?;
    let table = report.to_table();

    let out = ensure_out(&cfg.out)?;
    let doc_path = out.join(format!("backtest_{}.txt", bt.model.as_str()));
    let table_path = out.join(format!("backtest_{}_table.txt", bt.model.as_str()));
    report.save(&doc_path)?;
    std::fs::write(&table_path, &table)?;

    print!("{table}");
    println!("wrote {}", doc_path.display());
    println!("wrote {}", table_path.display());
    Ok(())
}

/// Splits the evaluation span (everything after the first `window` periods)
/// in two for reporting, mirroring the anterior/posterior convention of the
/// backtest tables.
fn default_halves(panel: &ReturnsPanel, window: usize) -> Result<Vec<SplitSpec>> {
    let dates = panel.dates();
    if window >= dates.len() {
        return Err(Error::Input(format!(
            "window {window} leaves no evaluation periods in a {}-period panel",
            dates.len()
        )));
    }
    let eval = &dates[window..];
    let n = eval.len();
    if n < 4 {
        return Err(Error::Input(format!(
            "splitting the evaluation span in halves needs at least 4 periods, got {n}"
        )));
    }
    let mid = n / 2;
    Ok(vec![
        SplitSpec { label: "Anterior half".into(), start: eval[0], end: eval[mid - 1] },
        SplitSpec { label: "Posterior half".into(), start: eval[mid], end: eval[n - 1] },
    ])
}

/// Loads two report documents and writes their difference table.
pub fn cmd_compare(cfg: &RunConfig, first: &Path, second: &Path) -> Result<()> {
    let a = BacktestReport::load(first).map_err(|e| annotate_io(e, first))?;
    let b = BacktestReport::load(second).map_err(|e| annotate_io(e, second))?;
    let table = compare_reports(&a, &b)?.to_table();

    let out = ensure_out(&cfg.out)?;
    let path = out.join("comparison.txt");
    std::fs::write(&path, &table)?;

    print!("{table}");
    println!("wrote {}", path.display());
    Ok(())
}

/// Writes per-asset summary statistics of the panel's return series.
pub fn cmd_stats(cfg: &RunConfig) -> Result<()> {
    let panel = load_data(cfg)?;
    let values = panel.values();
    let mut stats = Vec::with_capacity(panel.n_assets());
    for j in 0..panel.n_assets() {
        let col: Vec<f64> = values.column(j).iter().copied().collect();
        stats.push(summary_stats(&col, cfg.periods_per_year));
    }
    let text = stats_table(&panel, &stats, cfg.periods_per_year);

    let out = ensure_out(&cfg.out)?;
    let path = out.join("stats.txt");
    std::fs::write(&path, &text)?;

    print!("{text}");
    println!("wrote {}", path.display());
    Ok(())
}

/// Fixed-width table: one column per asset in input order, one row per
/// statistic, two decimals. Assets whose series admits no statistics (too
/// short after price conversion, or constant) show `n/a` and are explained
/// under the table; the rest are reported normally.
fn stats_table(
    panel: &ReturnsPanel,
    stats: &[Result<SummaryStats>],
    periods_per_year: u32,
) -> String {
    let dates = panel.dates();
    let mut out = format!(
        "Return statistics: {} assets, {} periods ({} to {}), {} per year\n\n",
        panel.n_assets(),
        panel.n_periods(),
        dates[0],
        dates[dates.len() - 1],
        periods_per_year
    );
    let label_w = 8; // widest row label, "Kurtosis"
    let widths: Vec<usize> = panel.assets().iter().map(|a| a.chars().count().max(6) + 2).collect();

    out.push_str(&format!("{:<label_w$}", ""));
    for (name, w) in panel.assets().iter().zip(&widths) {
        out.push_str(&format!("{name:>w$}"));
    }
    out.push('\n');

    type Field = fn(&SummaryStats) -> String;
    let rows: [(&str, Field); 5] = [
        ("Mean [%]", |s| format!("{:.2}", s.mean_ann * 100.0)),
        ("Std. [%]", |s| format!("{:.2}", s.std_ann * 100.0)),
        ("R/R", |s| match s.rr {
            Some(rr) => format!("{rr:.2}"),
            None => "n/a".to_string(),
        }),
        ("Skew", |s| format!("{:.2}", s.skewness)),
        ("Kurtosis", |s| format!("{:.2}", s.kurtosis)),
    ];
    for (label, field) in rows {
        out.push_str(&format!("{label:<label_w$}"));
        for (stat, w) in stats.iter().zip(&widths) {
            let cell = match stat {
                Ok(s) => field(s),
                Err(_) => "n/a".to_string(),
            };
            out.push_str(&format!("{cell:>w$}"));
        }
        out.push('\n');
    }

    let mut flagged = false;
    for (name, stat) in panel.assets().iter().zip(stats) {
        if let Err(err) = stat {
            if !flagged {
                out.push('\n');
                flagged = true;
            }
            let reason = match err {
                Error::Input(msg) => msg.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("flagged {name}: {reason}\n"));
        }
    }
    out
}

fn load_data(cfg: &RunConfig) -> Result<ReturnsPanel> {
    let path = cfg.data.as_ref().ok_or_else(|| {
        Error::Input("no input panel; pass --data or set `data` in the config".into())
    })?;
    load_panel(path, cfg.kind).map_err(|e| annotate_io(e, path))
}

fn ensure_out(dir: &PathBuf) -> Result<&Path> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.as_path())
}
