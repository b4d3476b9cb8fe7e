use std::fs;
use std::process::Command;

use cfdist::simgen::{self, BoundsDgpSpec, BoundsVariant};

fn cfdist() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cfdist"))
}

#[test]
fn sim_bounds_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = cfdist()
        .args(["--reps", "2", "--n", "300", "--n-mc", "5000", "--seed", "4", "sim-bounds", "--variant", "nonlinear"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["replicates.csv", "aggregates.csv", "plots.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn undersized_run_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let st = cfdist().args(["--n", "5", "sim-bounds"]).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn unreadable_table_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let st = cfdist()
        .args(["fit-csv", "--input"])
        .arg(dir.path().join("absent.csv"))
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"k_folds": 4}"#).unwrap();
    let st = cfdist().arg("--config").arg(&cfg).args(["--reps", "1", "sim-iv-ate"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn fit_csv_runs_bounds_on_covariate_table() {
    let dir = tempfile::tempdir().unwrap();
    let s = simgen::gen_bounds_dgp(&BoundsDgpSpec { variant: BoundsVariant::LinearScm, n: 500, seed: 2 }).unwrap();
    let table = dir.path().join("table.csv");
    s.data.write_csv(fs::File::create(&table).unwrap()).unwrap();
    let out = cfdist().args(["fit-csv", "--input"]).arg(&table).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let agg = fs::read_to_string(dir.path().join("aggregates.csv")).unwrap();
    assert!(agg.contains("dr_smooth_u"));
}

#[test]
fn oracle_prints_truth() {
    let out = cfdist()
        .args(["--n-mc", "10000", "oracle", "--dgp", "iv-linear-binary", "--target", r#"{"kind":"ate","a1":1.0,"a0":0.0}"#])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["value"].as_f64().unwrap() - 2.0).abs() < 1e-12);
}
