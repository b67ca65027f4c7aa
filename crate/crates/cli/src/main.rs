//! `tpfolio`: latent covariance models and minimum-variance backtests for
//! asset-return panels, driven from the command line.
//!
//! Subcommands: `simulate` writes a synthetic panel with known ground-truth
//! covariance, `fit` estimates one latent model on a panel, `backtest` rolls
//! a minimum-variance portfolio over it, `compare` tabulates the difference
//! between two backtest reports, and `stats` summarizes each asset's return
//! series.
//!
//! Settings come from built-in defaults, overlaid by `--config FILE` (flat
//! `key = value` lines, `#` comments), overlaid by flags; see [`config`].
//! Every run is a pure function of its inputs and the seed, so repeating a
//! command reproduces its output files byte for byte.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
//! failure. Failures print exactly one line to stderr, shaped
//! `error: <category>: <message>` with `category` one of `config`, `io`,
//! `numerical`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tpfolio_core::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "tpfolio",
    version,
    about = "Latent covariance models and minimum-variance backtests for return panels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic return panel with known true covariance.
    Simulate(CommonArgs),
    /// Fit one latent covariance model to a panel.
    Fit(CommonArgs),
    /// Roll a minimum-variance backtest over a panel.
    Backtest(CommonArgs),
    /// Tabulate the difference between two backtest reports.
    Compare(CompareArgs),
    /// Summarize each asset's return series.
    Stats(CommonArgs),
}

/// Flags shared by every subcommand. Each one overrides the config-file key
/// of the same name; flags a given subcommand does not consume are ignored,
/// like unused config keys.
#[derive(Args)]
struct CommonArgs {
    /// Config file of flat `key = value` lines ('#' starts a comment).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Input panel: comma-delimited, header `date,ASSET,...`, ISO dates.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Covariance estimator.
    #[arg(long, value_name = "gplvm|tplvm|samplecov")]
    model: Option<String>,
    /// Look-back length in periods.
    #[arg(long, value_name = "N")]
    window: Option<usize>,
    /// Latent dimension Q.
    #[arg(long = "latent-dim", value_name = "Q")]
    latent_dim: Option<usize>,
    /// Constrain portfolio weights to be nonnegative.
    #[arg(long = "long-only")]
    long_only: bool,
    /// Master seed; every random stage derives its own stream from it.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, created on demand.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Baseline backtest report document.
    #[arg(value_name = "REPORT_A")]
    report_a: PathBuf,
    /// Second report document; differences are second minus first.
    #[arg(value_name = "REPORT_B")]
    report_b: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}: {}", category(&err), one_line(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: &Cli) -> tpfolio_core::Result<()> {
    match &cli.command {
        Command::Simulate(args) => commands::cmd_simulate(&RunConfig::from_args(args)?),
        Command::Fit(args) => commands::cmd_fit(&RunConfig::from_args(args)?),
        Command::Backtest(args) => commands::cmd_backtest(&RunConfig::from_args(args)?),
        Command::Compare(args) => {
            let cfg = RunConfig::from_args(&args.common)?;
            commands::cmd_compare(&cfg, &args.report_a, &args.report_b)
        }
        Command::Stats(args) => commands::cmd_stats(&RunConfig::from_args(args)?),
    }
}

/// Machine-parseable error category; the first token after `error:`.
fn category(err: &Error) -> &'static str {
    match err {
        Error::Input(_) | Error::State(_) => "config",
        Error::Io(_) | Error::Panel(_) | Error::Document(_) => "io",
        Error::Numerical(_) | Error::CholeskyFailed { .. } => "numerical",
    }
}

fn exit_code(err: &Error) -> u8 {
    match category(err) {
        "config" => 2,
        "io" => 3,
        _ => 4,
    }
}

/// Full error text flattened to one line.
fn one_line(err: &Error) -> String {
    err.to_string().replace('\n', "; ")
}
