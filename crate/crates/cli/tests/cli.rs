//! End-to-end tests driving the `drsurv` binary.

use std::path::Path;
use std::process::{Command, Output};

fn drsurv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drsurv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn drsurv")
}

fn simulate(dir: &Path, name: &str, clusters: &str, seed: &str) {
    let out = drsurv(
        dir,
        &[
            "simulate",
            "--scenario",
            "scenario1",
            "--clusters",
            clusters,
            "--seed",
            seed,
            "--output",
            name,
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "a.csv", "8", "42");
    simulate(dir.path(), "b.csv", "8", "42");
    simulate(dir.path(), "c.csv", "8", "43");
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    let c = std::fs::read(dir.path().join("c.csv")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical CSV");
    assert_ne!(a, c, "different seed must change the data");
}

#[test]
fn fit_report_round_trips_and_gates_variance() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "dat.csv", "10", "7");
    let out = drsurv(
        dir.path(),
        &[
            "fit",
            "--data",
            "dat.csv",
            "--outcome",
            "W2 + Z1 + Z2",
            "--times",
            "0.5,1",
            "--output",
            "fit.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("Clusters (M):    10"));
    assert!(stdout.contains("Obs (N):"));
    assert!(stdout.contains("Outcome model:   Surv(time, event) ~ W2 + Z1 + Z2"));
    // censoring RHS defaults to the outcome RHS
    assert!(stdout.contains("Censoring model: Surv(time, event == 0) ~ W2 + Z1 + Z2"));

    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["clusters"], 10);
    assert!(json["inference"].is_null(), "variance=none must omit inference");
    for entry in json["report"]["spce"].as_array().unwrap() {
        assert!(entry["se"].is_null());
        assert!(entry["ci_lower"].is_null());
    }

    // identical run is byte-identical
    let first = std::fs::read(dir.path().join("fit.json")).unwrap();
    let out2 = drsurv(
        dir.path(),
        &[
            "fit",
            "--data",
            "dat.csv",
            "--outcome",
            "W2 + Z1 + Z2",
            "--times",
            "0.5,1",
            "--output",
            "fit2.json",
        ],
    );
    assert!(out2.status.success());
    let second = std::fs::read(dir.path().join("fit2.json")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn fit_jackknife_reports_t_intervals() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "dat.csv", "10", "3");
    let out = drsurv(
        dir.path(),
        &[
            "fit",
            "--data",
            "dat.csv",
            "--method",
            "km",
            "--variance",
            "jackknife",
            "--times",
            "1",
            "--output",
            "fit.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    // df = M - 2 = 8
    assert!(stdout.contains("t-intervals with df = 8, alpha = 0.050"), "{stdout}");
    assert!(stdout.contains("(LCL, UCL)"));

    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(json["inference"]["df"], 8);
    for entry in json["report"]["spce"].as_array().unwrap() {
        let est = entry["estimate"].as_f64().unwrap();
        let lo = entry["ci_lower"].as_f64().unwrap();
        let hi = entry["ci_upper"].as_f64().unwrap();
        assert!(entry["se"].as_f64().unwrap() >= 0.0);
        assert!(lo <= est && est <= hi);
    }
}

#[test]
fn rmst_estimand_requires_tau() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "dat.csv", "8", "1");
    let out = drsurv(
        dir.path(),
        &["fit", "--data", "dat.csv", "--estimand", "rmst"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("stderr must be machine-readable JSON");
    assert_eq!(err["exit_code"], 2);
    assert!(err["error"].as_str().unwrap().contains("--tau"));
}

#[test]
fn invalid_treatment_probability_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "dat.csv", "8", "1");
    let out = drsurv(
        dir.path(),
        &["fit", "--data", "dat.csv", "--pi", "1.5"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rmst_fit_reports_horizon_effects() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "dat.csv", "8", "5");
    let out = drsurv(
        dir.path(),
        &[
            "fit",
            "--data",
            "dat.csv",
            "--outcome",
            "W2 + Z1",
            "--estimand",
            "rmst",
            "--tau",
            "1.5",
            "--output",
            "fit.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("mu1"));
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("fit.json")).unwrap()).unwrap();
    let rmst = json["report"]["rmst"].as_array().unwrap();
    assert_eq!(rmst.len(), 2); // both levels at one horizon
    for entry in rmst {
        let mu = entry["estimate"].as_f64().unwrap();
        assert!(mu.abs() < 1.5, "RMST difference bounded by the horizon");
    }
}

#[test]
fn truth_then_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = drsurv(
        dir.path(),
        &[
            "truth",
            "--scenario",
            "scenario1",
            "--clusters",
            "2000",
            "--times",
            "1",
            "--cache-dir",
            "cache",
            "--output",
            "truth.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = drsurv(
        dir.path(),
        &[
            "evaluate",
            "--scenario",
            "scenario1",
            "--reps",
            "2",
            "--strategies",
            "km",
            "--spce-times",
            "1",
            "--truth",
            "truth.json",
            "--output",
            "metrics.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("PBias"));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("strategy,"));
    assert_eq!(lines.count(), 2, "km at one time, two levels");
    // AESE/CP columns empty without jackknife
    assert!(csv.lines().nth(1).unwrap().contains(",,"));
}

#[test]
fn evaluate_rejects_mismatched_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = drsurv(
        dir.path(),
        &[
            "truth",
            "--scenario",
            "scenario1",
            "--clusters",
            "1000",
            "--cache-dir",
            "cache",
            "--output",
            "truth.json",
        ],
    );
    assert!(out.status.success());
    let out = drsurv(
        dir.path(),
        &[
            "evaluate",
            "--scenario",
            "scenario3",
            "--reps",
            "1",
            "--strategies",
            "km",
            "--spce-times",
            "1",
            "--truth",
            "truth.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("scenario"));
}
