//! End-to-end checks of the command-line surface: subcommands, artifacts,
//! and exit codes (0 success, 1 contract/config violation, 2 verification
//! failure is exercised only through the library since the suite passes).

use std::path::Path;
use std::process::Command;

fn prism() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prism"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).expect("write config");
}

#[test]
fn run_emits_artifacts_and_succeeds() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("run.cfg");
    write(
        &cfg,
        "n_tasks = 2\nsamples_per_task = 120\nseed = 7\n",
    );
    let out = dir.path().join("out");
    let status = prism()
        .args(["run"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--export-tasks")
        .status()
        .expect("spawn");
    assert!(status.success());
    for name in [
        "report.json",
        "accuracy_matrix.csv",
        "metrics.csv",
        "heatmap.csv",
        "diagnostics.csv",
        "gamma.csv",
        "task_0_inputs.csv",
        "task_0_labels.csv",
    ] {
        assert!(out.join(name).exists(), "missing {name}");
    }
}

#[test]
fn empty_config_applies_defaults() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("empty.cfg");
    write(&cfg, "");
    let out = dir.path().join("out");
    let status = prism()
        .args(["diagnose"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .expect("spawn");
    assert!(status.success());
    assert!(out.join("gamma.csv").exists());
}

#[test]
fn bad_config_exits_with_code_one() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("bad.cfg");
    write(&cfg, "mystery_key = 3\n");
    let status = prism()
        .args(["run"])
        .arg(&cfg)
        .status()
        .expect("spawn");
    assert_eq!(status.code(), Some(1));
}

#[test]
fn sweep_writes_aggregate_csv() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("sweep.cfg");
    write(&cfg, "n_tasks = 2\nsamples_per_task = 120\n");
    let out = dir.path().join("out");
    let status = prism()
        .args(["sweep"])
        .arg(&cfg)
        .args(["--axis", "beta", "--values", "0.1,0.5"])
        .arg("--out")
        .arg(&out)
        .status()
        .expect("spawn");
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("sweep.csv")).expect("sweep.csv");
    assert_eq!(text.lines().count(), 3, "header plus one row per value");
}
