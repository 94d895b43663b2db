use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn recover(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recover"))
        .args(args)
        .output()
        .expect("spawn recover")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn mc_check_small_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = recover(&["mc-check", "--n", "20000", "--instances", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("mc_check.json")).unwrap()).unwrap();
    assert_eq!(report["failures"], 0);
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = recover(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"schema_version": 1, "teacher": {"d": 4}}"#).unwrap();
    let out = recover(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_config_file_is_io_error() {
    let out = recover(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn certify_from_config_reports_positive_decay() {
    let dir = tempfile::tempdir().unwrap();
    let out = recover(&[
        "certify",
        "--config",
        &config("acceptance.json"),
        "--grid-n",
        "180",
        "--ambient",
        "100",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["rho_fit"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("certificate.json").exists());
}

#[test]
fn gen_teacher_then_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = dir.path().join("teacher.json");
    let out = recover(&["gen-teacher", "--d", "6", "--a", "1,-1.5", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t: serde_json::Value = serde_json::from_slice(&fs::read(&teacher).unwrap()).unwrap();
    let d = t["W"][0].as_array().unwrap().len();
    assert_eq!(d, 6);

    let student = dir.path().join("student.json");
    let w: Vec<Vec<f64>> = (0..3).map(|j| (0..d).map(|k| if k == j { 1.0 } else { 0.0 }).collect()).collect();
    let s = serde_json::json!({"a": [0.5, -0.5, 0.2], "W": w, "alpha": 0.0, "beta": vec![0.0; d]});
    fs::write(&student, s.to_string()).unwrap();
    let out = recover(&[
        "diagnose",
        "--teacher",
        teacher.to_str().unwrap(),
        "--student",
        student.to_str().unwrap(),
        "--lambda",
        "0.01",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["square_loss"].as_f64().unwrap() > 0.0);
}

#[test]
fn quick_train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = recover(&["train", "--config", &config("quick.json"), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["teacher.json", "student_final.json", "trace.csv", "diagnostics.jsonl", "summary.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["schema_version"], 1);
}
