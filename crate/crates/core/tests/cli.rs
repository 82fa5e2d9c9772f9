use std::fs;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_prism-fcp");

const SMALL: &[&str] = &[
    "--trials",
    "2",
    "--set",
    "n_clients=20",
    "--set",
    "n_byzantine=4",
    "--set",
    "participants_per_round=5",
    "--set",
    "dim=8",
    "--set",
    "n_train_iters=100",
    "--set",
    "n_calib=100",
    "--set",
    "n_test=100",
    "--set",
    "histogram_bins=20",
];

fn run(sub: &str, out: &std::path::Path, extra: &[&str]) -> std::process::Output {
    Command::new(BIN)
        .arg(sub)
        .arg("--out-dir")
        .arg(out)
        .args(SMALL)
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("run", dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "results.csv",
        "summary.json",
        "bounds.csv",
        "mse_trajectory.csv",
        "histograms.csv",
        "maliciousness.csv",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let header = results.lines().next().unwrap();
    assert_eq!(
        header,
        "trial_id,method,attack,m_over_d,coverage,mean_width,quantile,saturation_flag,\
         final_mse_db,quantile_deviation,tp,fp,comm_up,comm_down"
    );
    // 2 trials x 3 methods x 3 attacks.
    assert_eq!(results.lines().count(), 1 + 18);
    let hist = fs::read_to_string(dir.path().join("histograms.csv")).unwrap();
    assert_eq!(hist.lines().count(), 21);
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let files = ["results.csv", "summary.json", "bounds.csv", "mse_trajectory.csv", "histograms.csv"];
    assert!(run("run", dir.path(), &["--seed", "5"]).status.success());
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
    assert!(run("run", dir.path(), &["--seed", "5"]).status.success());
    for (f, bytes) in files.iter().zip(first) {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), bytes, "{f} differs");
    }
}

#[test]
fn sweep_and_figs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("sweep", dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    // 2 trials x 5 ratios, one method and one attack.
    assert_eq!(results.lines().count(), 1 + 10);

    let figs = tempfile::tempdir().unwrap();
    assert!(run("emit-figs", figs.path(), &[]).status.success());
    assert!(figs.path().join("maliciousness_efficiency.csv").exists());
}

#[test]
fn config_file_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"methods": ["fcp"], "calib_attack": {"kinds": ["coverage"]}}"#).unwrap();
    let out = run("run", dir.path(), &["--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2);

    let bad = run("run", dir.path(), &["--set", "n_byzantine=50"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("n_byzantine"));

    let missing = run("run", dir.path(), &["--config", "/nonexistent/cfg.json"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/cfg.json"));

    let uci = run("replicate-table2", dir.path(), &["--set", "uci.csv_path=/nonexistent/train.csv"]);
    assert!(!uci.status.success());
}
