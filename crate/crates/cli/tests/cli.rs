use std::path::Path;
use std::process::{Command, Output};

use latentgrade::grading::Calibration;
use latentgrade::latentgeom::Probe;

const SMALL: [&str; 16] = [
    "--n-train",
    "120",
    "--n-val",
    "12",
    "--n-test",
    "24",
    "--image-size",
    "16",
    "--total-samples",
    "64",
    "--batch-size",
    "16",
    "--base-width",
    "8",
    "--log-every",
    "0",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentgrade"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, cmd: &str, extra: &[&str]) -> String {
    let mut args = vec![cmd, "--seed", "3", "--eval-steps", "4", "--generation-steps", "8"];
    args.extend(SMALL);
    args.extend(extra);
    let out = run(dir, &args);
    assert!(
        out.status.success(),
        "{cmd} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string()
}

#[test]
fn full_pipeline_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let summary = ok(d, "synth", &[]);
    assert!(summary.contains("manifest sha256"));
    let header = std::fs::read_to_string(d.join("data/manifest.csv")).unwrap();
    assert!(header.starts_with("filename,split,compression,grade,fractured,graded\n"));

    ok(d, "train", &[]);
    let loss = std::fs::read_to_string(d.join("runs/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 4);

    let probe_out = ok(d, "probe", &[]);
    assert!(probe_out.contains("validation AUC"));
    let probe_text = std::fs::read_to_string(d.join("runs/probe.json")).unwrap();
    let probe = Probe::from_json(&probe_text, Path::new("probe.json")).unwrap();
    assert_eq!(probe.to_json().unwrap().trim_end(), probe_text.trim_end());

    ok(d, "calibrate", &[]);
    let cal_text = std::fs::read_to_string(d.join("runs/calibration.json")).unwrap();
    let cal = Calibration::from_json(&cal_text, Path::new("calibration.json")).unwrap();
    assert_eq!(cal.to_json().unwrap().trim_end(), cal_text.trim_end());

    let csv = ok(d, "grade", &["data/test_00000.png", "data/test_00001.png"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("filename,distance,continuous_grade,ordinal_grade"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 4);
        let g: f64 = cols[2].parse().unwrap();
        let o: f64 = cols[3].parse().unwrap();
        assert_eq!(o, g.clamp(0.0, 3.0).round());
    }

    let sweep = ok(d, "sweep", &["data/test_00002.png", "--grades", "0,3"]);
    assert!(sweep.starts_with("target_grade,target_distance,measured_reduction\n"));
    assert!(d.join("runs/test_00002_sweep.png").exists());

    let report = ok(d, "eval", &[]);
    assert!(report.contains("detection AUC"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("runs/eval_report.json")).unwrap()).unwrap();
    assert!(json["macro_f1"].is_number());
    let pca = std::fs::read_to_string(d.join("runs/latent_pca.csv")).unwrap();
    assert_eq!(pca.lines().count(), 1 + 24);
}

#[test]
fn poly3_reports_monotonicity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cmd in ["synth", "train", "probe"] {
        ok(d, cmd, &[]);
    }
    let out = ok(d, "calibrate", &["--calibration-kind", "poly3"]);
    assert!(out.contains("monotone"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("runs/calibration_report.json")).unwrap()).unwrap();
    assert!(report["monotone"].is_boolean());
}

#[test]
fn probe_refuses_single_class_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, "synth", &["--compressed-fraction", "0"]);
    ok(d, "train", &[]);
    let mut args = vec!["probe"];
    args.extend(SMALL);
    let out = run(d, &args);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).starts_with("error: degenerate-labels: "), "{}", error_line(&out));
}

#[test]
fn errors_are_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval", "--data-dir", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    let line = error_line(&out);
    assert!(line.starts_with("error: io: "), "{line}");

    let out = run(dir.path(), &["synth", "--n-train", "lots"]);
    assert!(error_line(&out).starts_with("error: invalid-config: "));

    let out = run(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: usage: "));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.ini"),
        "[paths]\ndata_dir = from_file\n\n[synth]\nn_train = 10\nn_val = 2\nn_test = 2\nimage_size = 16\n",
    )
    .unwrap();
    let out = run(d, &["synth", "--config", "run.ini", "--n-train", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(d.join("from_file/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 6 + 2 + 2);

    std::fs::write(d.join("bad.ini"), "[model]\nn_train = 10\n").unwrap();
    let out = run(d, &["synth", "--config", "bad.ini"]);
    assert!(error_line(&out).starts_with("error: invalid-config: "));
}

#[test]
fn synth_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = ok(d, "synth", &[]);
    let b = ok(d, "synth", &[]);
    assert_eq!(a, b);
}
