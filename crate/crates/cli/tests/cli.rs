//! End-to-end tests of the `tpfolio` binary: exit codes, the one-line error
//! contract, file emission, determinism, and the frozen backtest report.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpfolio"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn path_arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn missing_panel_exits_with_io_code_and_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let missing = tmp.path().join("nope.csv");
    let out = run(&[
        "fit",
        "--data",
        path_arg(&missing),
        "--model",
        "gplvm",
        "--out",
        path_arg(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    let err = stderr(&out);
    assert!(err.starts_with("error: io: "), "got {err:?}");
    assert_eq!(err.trim_end().lines().count(), 1, "one-line contract: {err:?}");
    assert!(err.contains("nope.csv"), "error names the file: {err:?}");
    assert!(!out_dir.exists(), "failed run must not leave outputs");
}

#[test]
fn unknown_config_key_is_rejected_with_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "window = 12\nwindoww = 9\n").unwrap();
    let out = run(&["backtest", "--config", path_arg(&conf)]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("error: config: "), "got {err:?}");
    assert!(err.contains("unknown key `windoww`") && err.contains("line 2"), "got {err:?}");
}

#[test]
fn backwards_split_is_a_config_error_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    std::fs::write(&conf, "split = Backwards, 2002-01-31, 2001-01-31\n").unwrap();
    // No --data: validation must reject the empty range before missing data
    // could matter.
    let out = run(&["backtest", "--config", path_arg(&conf)]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("start"), "got {}", stderr(&out));
}

#[test]
fn split_selecting_too_few_periods_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    // Both ends sit between month ends, so the range is valid but selects
    // zero realized periods.
    std::fs::write(
        &conf,
        "model = samplecov\nwindow = 12\nsplit = Hole, 2011-02-02, 2011-02-20\nsplit = Rest, 2011-03-31, 2013-04-30\n",
    )
    .unwrap();
    let out = run(&[
        "backtest",
        "--config",
        path_arg(&conf),
        "--data",
        path_arg(&fixture("panel.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("Hole") && err.contains("selects 0"), "got {err:?}");
}

#[test]
fn simulate_writes_identical_bytes_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("sim.conf");
    std::fs::write(&conf, "assets = 5\nperiods = 24\ngenerator = t\nnu = 5\n").unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for dir in &dirs {
        let out = run(&["simulate", "--config", path_arg(&conf), "--seed", "3", "--out", path_arg(dir)]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(read(&dirs[0].join("panel.csv")), read(&dirs[1].join("panel.csv")));
    assert_eq!(read(&dirs[0].join("truth_cov.csv")), read(&dirs[1].join("truth_cov.csv")));

    let panel =
        tpfolio_core::load_panel(&dirs[0].join("panel.csv"), tpfolio_core::PanelKind::Returns)
            .expect("simulated panel parses back");
    assert_eq!((panel.n_periods(), panel.n_assets()), (24, 5));
}

#[test]
fn seed_flag_is_equivalent_to_the_config_key() {
    let tmp = tempfile::tempdir().unwrap();
    let base = "assets = 4\nperiods = 24\n";
    let conf_one = tmp.path().join("one.conf");
    let conf_two = tmp.path().join("two.conf");
    std::fs::write(&conf_one, format!("{base}seed = 1\n")).unwrap();
    std::fs::write(&conf_two, format!("{base}seed = 2\n")).unwrap();

    let flag_dir = tmp.path().join("flag");
    let key_dir = tmp.path().join("key");
    let other_dir = tmp.path().join("other");
    // seed = 1 in the file, overridden to 2 by the flag.
    let out = run(&["simulate", "--config", path_arg(&conf_one), "--seed", "2", "--out", path_arg(&flag_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(&["simulate", "--config", path_arg(&conf_two), "--out", path_arg(&key_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(&["simulate", "--config", path_arg(&conf_one), "--out", path_arg(&other_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));

    let flagged = read(&flag_dir.join("panel.csv"));
    assert_eq!(flagged, read(&key_dir.join("panel.csv")), "flag must equal config key");
    assert_ne!(flagged, read(&other_dir.join("panel.csv")), "different seeds must differ");
}

#[test]
fn fit_summary_loglik_matches_reloaded_model() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("fit.conf");
    std::fs::write(&conf, "max_iters = 200\nrestarts = 2\ntol = 1e-6\n").unwrap();
    let out_dir = tmp.path().join("out");
    for model in ["tplvm", "gplvm"] {
        let out = run(&[
            "fit",
            "--config",
            path_arg(&conf),
            "--data",
            path_arg(&fixture("panel.csv")),
            "--model",
            model,
            "--seed",
            "5",
            "--out",
            path_arg(&out_dir),
        ]);
        assert!(out.status.success(), "{model}: {}", stderr(&out));
    }

    // Same seed, different likelihoods: two distinct, loadable documents.
    let doc_t = read(&out_dir.join("model_tplvm.txt"));
    let doc_g = read(&out_dir.join("model_gplvm.txt"));
    assert_ne!(doc_t, doc_g);
    let model = tpfolio_core::FittedLvm::load(&out_dir.join("model_tplvm.txt")).unwrap();
    assert!(model.nu.is_some(), "t model stores its tail weight");
    let gauss = tpfolio_core::FittedLvm::load(&out_dir.join("model_gplvm.txt")).unwrap();
    assert!(gauss.nu.is_none());

    // The reloaded model reproduces the summary's log-likelihood.
    let summary = read(&out_dir.join("fit_summary_tplvm.txt"));
    let line = summary
        .lines()
        .find(|l| l.starts_with("loglik = "))
        .expect("summary has a loglik line");
    let reported: f64 = line["loglik = ".len()..].trim().parse().unwrap();
    let panel =
        tpfolio_core::load_panel(&fixture("panel.csv"), tpfolio_core::PanelKind::Returns).unwrap();
    let y = panel.values().transpose();
    let recomputed = model.loglik(&y).unwrap();
    assert!(
        (recomputed - reported).abs() <= 1e-12 * reported.abs().max(1.0),
        "reloaded loglik {recomputed} vs summary {reported}"
    );

    // The trace file holds the (nondecreasing) objective path ending at the
    // summary's objective value.
    let trace = read(&out_dir.join("fit_trace_tplvm.txt"));
    let values: Vec<f64> = trace.lines().map(|l| l.parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] >= w[0]), "trace must be nondecreasing");
    let objective_line = summary
        .lines()
        .find(|l| l.starts_with("objective = "))
        .expect("summary has an objective line");
    let objective: f64 = objective_line["objective = ".len()..].trim().parse().unwrap();
    assert_eq!(*values.last().unwrap(), objective);
}

#[test]
fn backtest_report_matches_frozen_golden_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for dir in &dirs {
        let out = run(&[
            "backtest",
            "--config",
            path_arg(&fixture("backtest.conf")),
            "--data",
            path_arg(&fixture("panel.csv")),
            "--out",
            path_arg(dir),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let got = read(&dirs[0].join("backtest_tplvm.txt"));
    assert_eq!(got, read(&dirs[1].join("backtest_tplvm.txt")), "rerun changed bytes");
    assert_eq!(got, read(&fixture("golden_backtest_tplvm.txt")), "report drifted from golden");

    let table = read(&dirs[0].join("backtest_tplvm_table.txt"));
    for section in ["Anterior half", "Posterior half", "Whole period"] {
        assert!(table.contains(section), "table misses section {section:?}:\n{table}");
    }

    // The document reloads into the same report it serialized from.
    let report = tpfolio_core::BacktestReport::load(&dirs[0].join("backtest_tplvm.txt")).unwrap();
    assert_eq!(report.to_document(), got);
}

#[test]
fn compare_diffs_two_reports_section_by_section() {
    let tmp = tempfile::tempdir().unwrap();
    let free = tmp.path().join("free");
    let long = tmp.path().join("long");
    let data = fixture("panel.csv");
    for (dir, extra) in [(&free, None), (&long, Some("--long-only"))] {
        let mut args = vec![
            "backtest",
            "--data",
            path_arg(&data),
            "--model",
            "samplecov",
            "--window",
            "12",
            "--out",
            path_arg(dir),
        ];
        args.extend(extra);
        let out = run(&args);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let cmp_dir = tmp.path().join("cmp");
    let a = free.join("backtest_samplecov.txt");
    let b = long.join("backtest_samplecov.txt");
    let out = run(&["compare", path_arg(&a), path_arg(&b), "--out", path_arg(&cmp_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = read(&cmp_dir.join("comparison.txt"));
    for needle in ["Anterior half", "Posterior half", "Whole period", "difference", "Risk [%]"] {
        assert!(table.contains(needle), "comparison misses {needle:?}:\n{table}");
    }
}

#[test]
fn stats_reports_all_assets_and_flags_constant_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("panel.csv");
    std::fs::write(
        &data,
        "date,AAA,FLAT,CCC\n\
         2020-01-31,0.01,0.0,0.02\n\
         2020-02-29,-0.02,0.0,0.01\n\
         2020-03-31,0.015,0.0,-0.005\n\
         2020-04-30,0.003,0.0,0.012\n\
         2020-05-31,-0.007,0.0,0.004\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&["stats", "--data", path_arg(&data), "--out", path_arg(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));

    let text = read(&out_dir.join("stats.txt"));
    let header = text
        .lines()
        .find(|l| l.contains("AAA"))
        .expect("header row lists the assets");
    let (a, f, c) = (
        header.find("AAA").unwrap(),
        header.find("FLAT").unwrap(),
        header.find("CCC").unwrap(),
    );
    assert!(a < f && f < c, "columns must keep input order: {header:?}");
    for row in ["Mean [%]", "Std. [%]", "R/R", "Skew", "Kurtosis"] {
        assert!(text.contains(row), "missing row {row:?}:\n{text}");
    }
    assert!(
        text.contains("flagged FLAT") && text.contains("constant"),
        "constant asset must be flagged:\n{text}"
    );
    // The degenerate column is all n/a; the healthy ones carry numbers.
    let mean_row = text.lines().find(|l| l.starts_with("Mean [%]")).unwrap();
    assert!(mean_row.contains("n/a"));
    assert!(mean_row.contains("0.24") && mean_row.contains("9.84"), "got {mean_row:?}");

    // Identical reruns produce identical bytes.
    let again = tmp.path().join("again");
    let out = run(&["stats", "--data", path_arg(&data), "--out", path_arg(&again)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(text, read(&again.join("stats.txt")));
}
