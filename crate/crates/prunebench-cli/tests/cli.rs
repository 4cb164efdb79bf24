//! End-to-end tests of the command layer against a tiny synthetic dataset.

use std::path::Path;

use prunebench_cli::commands::{cmd_report, cmd_run, report_margin_table, Overrides};
use prunebench_cli::manifest::{fnv1a_hex, ArtifactPaths, RunManifest};

const TINY_CONFIG: &str = r#"
[data]
train_size = 96
test_size = 24

[experiment]
methods = ["unstructured_magnitude_local"]
rates = [2]
seeds = 1
subset = 8

[train]
max_epochs = 1

[attacks]
kinds = ["linf"]

[attacks.pgd]
steps = 5

[epsilons]
linf = [0.1]
"#;

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

#[test]
fn run_writes_manifest_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("out");
    let code = cmd_run(Some(&cfg), &out, &Overrides::default(), false).unwrap();
    assert_eq!(code, 0);

    let manifest = RunManifest::load(&out).unwrap();
    assert!(manifest.failures.is_empty());
    assert_eq!(manifest.seeds, vec![0]);
    assert!(manifest.artifacts_present(&out));
    let canonical = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert_eq!(manifest.config_hash, fnv1a_hex(&canonical));

    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    // rates 1 and 2, each with a clean row and one robust row
    assert_eq!(report.lines().count(), 1 + 4);
}

#[test]
fn resume_reuses_cells_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("out");
    cmd_run(Some(&cfg), &out, &Overrides::default(), false).unwrap();
    let first = std::fs::read_to_string(out.join("report.csv")).unwrap();
    cmd_run(Some(&cfg), &out, &Overrides::default(), true).unwrap();
    let second = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn unwritable_out_dir_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let blocker = dir.path().join("blocked");
    std::fs::write(&blocker, b"a file, not a directory").unwrap();
    let out = blocker.join("out");
    assert!(cmd_run(Some(&cfg), &out, &Overrides::default(), false).is_err());
}

#[test]
fn seed_env_var_shifts_the_seeds() {
    // spawn the binary so the env var does not leak across parallel tests
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("out");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_prunebench"))
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .env("PRUNEBENCH_SEED", "7")
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = RunManifest::load(&out).unwrap();
    assert_eq!(manifest.seeds, vec![7]);
}

/// A hand-written report covering one method at rates 1 and 2 with known
/// accuracy deltas.
fn fixture_report() -> String {
    let rows = [
        ("1,0,none,0.000000,clean_acc,0.855700"),
        ("1,0,l2,10.000000,robust_acc,0.618800"),
        ("1,0,l2,20.000000,robust_acc,0.400000"),
        ("2,0,none,0.000000,clean_acc,0.862100"),
        ("2,0,l2,10.000000,robust_acc,0.609400"),
        ("2,0,l2,20.000000,robust_acc,0.433600"),
    ];
    let mut text =
        String::from("method_structure,criterion,scope,rate,seed,attack,epsilon,metric,value,n_samples\n");
    for r in rows {
        text.push_str("unstructured,magnitude,local,");
        text.push_str(r);
        text.push_str(",256\n");
    }
    text
}

fn fixture_out_dir(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("out");
    std::fs::create_dir_all(out.join("cells")).unwrap();
    std::fs::write(out.join("report.csv"), fixture_report()).unwrap();
    std::fs::write(out.join("config.toml"), "").unwrap();
    let manifest = RunManifest {
        tool_version: "test".into(),
        config_hash: fnv1a_hex(""),
        seeds: vec![0],
        artifacts: ArtifactPaths {
            config: "config.toml".into(),
            report: "report.csv".into(),
            cells_dir: "cells".into(),
            checkpoints_dir: "checkpoints".into(),
        },
        failures: vec![],
    };
    manifest.save(&out).unwrap();
    out
}

#[test]
fn report_renders_margin_table_from_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = fixture_out_dir(dir.path());
    cmd_report(&out).unwrap();

    let report = prunebench::harness::RobustnessReport::from_csv(
        &std::fs::read_to_string(out.join("report.csv")).unwrap(),
    )
    .unwrap();
    let table = report_margin_table(&report).unwrap();
    let benign = &table.rows[0];
    assert_eq!(benign.0, "benign");
    assert_eq!(benign.1[0].render(), "85.57");
    assert_eq!(benign.1[1].render(), "86.21 (0.64)*");
    let l2a = table.rows.iter().find(|(l, _)| l == "l2_eps10").unwrap();
    assert_eq!(l2a.1[1].render(), "60.94 (-0.94)");
    let l2b = table.rows.iter().find(|(l, _)| l == "l2_eps20").unwrap();
    assert_eq!(l2b.1[1].render(), "43.36 (3.36)*");

    // rendered artifacts exist with the same numbers
    let margin_csv = std::fs::read_to_string(out.join("margin_table.csv")).unwrap();
    assert!(margin_csv.contains("benign,2,86.21,0.64,true"));
    assert!(margin_csv.contains("l2_eps10,2,60.94,-0.94,false"));
    let clean_csv = std::fs::read_to_string(out.join("clean_table.csv")).unwrap();
    assert!(clean_csv.starts_with("method,rate1,rate2\n"));
    assert!(clean_csv.contains("unstructured_magnitude_local,85.57,86.21"));
    let curve = std::fs::read_to_string(out.join("curves").join("curve_l2_eps10.csv")).unwrap();
    assert!(curve.contains("unstructured_magnitude_local,1,0.618800"));
    assert!(curve.contains("unstructured_magnitude_local,2,0.609400"));
}

#[test]
fn report_without_manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_report(dir.path()).unwrap_err();
    assert!(err.to_string().contains("manifest"));
}
