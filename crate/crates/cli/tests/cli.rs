use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ordss");

fn ordss(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env_remove("ORDSS_THREADS").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = ordss(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// `QUICK_FIT` with `flag` set to `value`.
fn quick_fit_with<'a>(flag: &str, value: &'a str) -> Vec<&'a str> {
    let mut args: Vec<&str> = QUICK_FIT.to_vec();
    let i = args.iter().position(|a| *a == flag).unwrap();
    args[i + 1] = value;
    args
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SIMULATE: &[&str] = &[
    "simulate", "--timepoints", "100", "--items", "3", "--categories", "7", "--ar", "0.3", "--cr", "0.25",
    "--thresholds", "equal", "--seed", "7", "--out", "data.csv",
];

const QUICK_FIT: &[&str] = &[
    "fit", "--model", "grm", "--data", "data.csv", "--particles", "100", "--iterations", "5", "--runs", "2",
    "--seed", "3", "--out", "fit.json",
];

#[test]
fn simulate_writes_the_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SIMULATE.to_vec();
    args.extend(["--states-out", "states.csv"]);
    ok(dir.path(), &args);
    let text = std::fs::read_to_string(dir.path().join("data.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,y1,y2,y3,y4,y5,y6");
    assert_eq!(lines.len(), 101);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 7);
        for f in &fields[1..] {
            let v: u32 = f.parse().unwrap();
            assert!((1..=7).contains(&v));
        }
    }
    let states = std::fs::read_to_string(dir.path().join("states.csv")).unwrap();
    assert!(states.starts_with("t,x1,x2\n"));
    assert_eq!(states.lines().count(), 101);
    let desc = json(&dir.path().join("data.csv.json"));
    assert_eq!(desc["recipe"]["seed"], 7);
    assert_eq!(desc["item_states"], serde_json::json!([1, 1, 1, 2, 2, 2]));
}

#[test]
fn invalid_input_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ordss(dir.path(), &["simulate", "--categories", "1", "--out", "x.csv"])), 2);
    assert!(!dir.path().join("x.csv").exists());

    std::fs::write(dir.path().join("bad.csv"), "t,y1,y2\n1,1,9\n2,2,1\n").unwrap();
    let out = ordss(dir.path(), &["fit", "--model", "grm", "--data", "bad.csv", "--categories", "3", "--out", "f.json"]);
    assert_eq!(code(&out), 2);
    std::fs::write(dir.path().join("bad.csv"), "t,y1,y2\n1,1,x\n").unwrap();
    let out = ordss(dir.path(), &["fit", "--model", "linear", "--data", "bad.csv", "--out", "f.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_files_exit_with_5() {
    let dir = tempfile::tempdir().unwrap();
    let out = ordss(dir.path(), &["fit", "--model", "grm", "--data", "nope.csv", "--out", "f.json"]);
    assert_eq!(code(&out), 5);
}

#[test]
fn fit_defaults_follow_the_estimator_settings() {
    let help = ordss(Path::new("."), &["fit", "--help"]);
    let text = String::from_utf8_lossy(&help.stdout);
    for default in [
        "--particles <PARTICLES>      [default: 1000]",
        "--iterations <ITERATIONS>    [default: 250]",
        "[default: 0.05]",
        "--perturb-sd <PERTURB_SD>    [default: 0.3]",
        "--runs <RUNS>                [default: 4]",
    ] {
        assert!(text.contains(default), "missing {default:?} in\n{text}");
    }
}

#[test]
fn fit_document_with_one_run() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SIMULATE);
    ok(dir.path(), &quick_fit_with("--runs", "1"));
    let doc = json(&dir.path().join("fit.json"));
    assert_eq!(doc["runs"].as_array().unwrap().len(), 1);
    assert_eq!(doc["runs"][0]["loglik_trace"].as_array().unwrap().len(), 5);
    assert_eq!(doc["config"]["runs"], 1);
    assert_eq!(doc["software"], "ordss");
    assert_eq!(doc["estimate"]["thresholds"].as_array().unwrap().len(), 6);
    let means = doc["filtered_means"].as_str().unwrap();
    assert!(dir.path().join(means).exists());
}

#[test]
fn linear_fit_reports_unit_stationary_variance() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SIMULATE);
    ok(dir.path(), &quick_fit_with("--model", "linear"));
    let doc = json(&dir.path().join("fit.json"));
    assert_eq!(doc["layout"]["kind"], "linear");
    assert_eq!(doc["estimate"]["loadings"].as_array().unwrap().len(), 6);
    for v in doc["stationary_variance"].as_array().unwrap() {
        assert!((v.as_f64().unwrap() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn se_adds_both_interval_levels() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SIMULATE);
    ok(dir.path(), QUICK_FIT);
    ok(
        dir.path(),
        &["se", "--fit", "fit.json", "--data", "data.csv", "--particles", "100", "--replicates", "1",
          "--target", "dynamics", "--out", "se.json"],
    );
    let doc = json(&dir.path().join("se.json"));
    let intervals = doc["se"]["intervals"].as_array().unwrap();
    assert_eq!(intervals.len(), 4);
    for iv in intervals {
        if iv["se"].is_null() {
            continue;
        }
        let (est, se) = (iv["estimate"].as_f64().unwrap(), iv["se"].as_f64().unwrap());
        let lo95 = iv["ci95"][0].as_f64().unwrap();
        let lo998 = iv["ci998"][0].as_f64().unwrap();
        assert!((est - lo95 - 1.96 * se).abs() < 1e-12);
        assert!((est - lo998 - 3.09 * se).abs() < 1e-12);
    }
}

#[test]
fn se_refuses_a_failed_fit() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SIMULATE);
    ok(dir.path(), QUICK_FIT);
    let mut doc = json(&dir.path().join("fit.json"));
    doc["failed_runs"] = 1.into();
    doc["runs"][1] = serde_json::json!({"run": 1, "error": "estimation failed: all weights are zero"});
    std::fs::write(dir.path().join("failed.json"), doc.to_string()).unwrap();
    let out = ordss(dir.path(), &["se", "--fit", "failed.json", "--data", "data.csv", "--particles", "50"]);
    assert_eq!(code(&out), 3);
}

const STUDY: &str = r#"{
  "conditions": [{"timepoints": 100, "items_per_state": 3, "categories": 3, "ar": 0.3, "cr": 0.0, "thresholds": "equal"}],
  "replications": 2,
  "base_seed": 5,
  "mif2": {"particles": 100, "iterations": 5, "runs": 2},
  "slice": {"particles": 50, "replicates": 1, "target": "dynamics"}
}"#;

#[test]
fn study_smoke_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("study.json"), STUDY).unwrap();
    ok(dir.path(), &["study", "--config", "study.json", "--out", "out"]);
    let reps = std::fs::read_to_string(dir.path().join("out/replicates.csv")).unwrap();
    assert!(reps.starts_with("timepoints,items,categories,ar,cr,spread,model,"));
    assert_eq!(reps.lines().count(), 1 + 2 * 2);
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(summary.starts_with("timepoints,items,categories,ar,cr,spread,model,"));
    assert_eq!(summary.lines().count(), 3);
    assert!(json(&dir.path().join("out/study.json"))["config"]["replications"] == 2);
}

#[test]
fn study_rejects_unknown_keys_and_off_grid_conditions() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.json"), STUDY.replace("\"base_seed\"", "\"bogus\": 1, \"base_seed\"")).unwrap();
    assert_eq!(code(&ordss(dir.path(), &["study", "--config", "s.json", "--out", "o"])), 2);
    std::fs::write(dir.path().join("s.json"), STUDY.replace("\"timepoints\": 100", "\"timepoints\": 150")).unwrap();
    assert_eq!(code(&ordss(dir.path(), &["study", "--config", "s.json", "--out", "o"])), 2);
}
