//! Runs the `tes` binary through its subcommands on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "data": {"kind": "toy", "toy": {"per_class": 40}, "known_classes": [0, 1, 2], "test_fraction": 0.25},
  "teacher_epochs": 3,
  "epochs": 3,
  "batch_size": 32,
  "probe_count": 30
}"#;

fn tes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tes")).args(args).output().expect("spawn tes")
}

fn ok(args: &[&str]) -> String {
    let out = tes(args);
    assert!(
        out.status.success(),
        "tes {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_produces_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let stdout = ok(&["run", "--config", &cfg, "--out", s(&out)]);
    assert!(stdout.contains("macro F1"), "{stdout}");
    for f in ["metrics.csv", "report.json", "thresholds.txt", "fakes/epoch_1.csv", "plots/losses.svg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("checkpoints/student.ckpt").is_file());

    let again = dir.path().join("again");
    ok(&["run", "--config", &cfg, "--out", s(&again)]);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());

    let reseeded = dir.path().join("reseeded");
    ok(&["run", "--config", &cfg, "--seed", "5", "--out", s(&reseeded)]);
    assert_ne!(fs::read(out.join("metrics.csv")).unwrap(), fs::read(reseeded.join("metrics.csv")).unwrap());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(reseeded.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--out", s(&data)]);
    for f in ["toy.csv", "train.csv", "test_known.csv", "test_unknown.csv", "config_files.json"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    let files_cfg = data.join("config_files.json");
    let fc = s(&files_cfg);
    let out = dir.path().join("out");
    let o = s(&out);

    ok(&["train-teacher", "--config", fc, "--out", o]);
    assert!(out.join("checkpoints/teacher.ckpt").is_file());
    ok(&["distill", "--config", fc, "--out", o]);
    let targets = fs::read_to_string(out.join("targets.csv")).unwrap();
    assert_eq!(targets.lines().next().unwrap(), "index,target_class,q_target,q_unknown");
    assert_eq!(targets.lines().count(), 91);

    let t = out.join("targets.csv");
    ok(&["train", "--config", fc, "--out", o, "--targets", s(&t)]);
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 4);
    ok(&["calibrate", "--config", fc, "--out", o]);
    let thresholds = fs::read_to_string(out.join("thresholds.txt")).unwrap();
    assert!(thresholds.contains("classes 3"), "{thresholds}");
    let stdout = ok(&["eval", "--config", fc, "--out", o]);
    assert!(stdout.contains("AUROC"), "{stdout}");
    let preds = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 30 + 10);

    // The staged result matches a one-shot run on the same files.
    let whole = dir.path().join("whole");
    ok(&["run", "--config", fc, "--out", s(&whole)]);
    assert_eq!(
        fs::read(out.join("metrics.csv")).unwrap(),
        fs::read(whole.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(out.join("thresholds.txt")).unwrap(),
        fs::read(whole.join("thresholds.txt")).unwrap()
    );
}

#[test]
fn noise_generators_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("noise");
    ok(&["gen-data", "--kind", "noise", "--count", "25", "--dim", "3", "--label", "4", "--out", s(&out)]);
    let text = fs::read_to_string(out.join("noise.csv")).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert!(text.lines().skip(1).all(|l| l.starts_with("4,")));

    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--out", s(&data)]);
    let overlay = dir.path().join("overlay");
    let src = data.join("train.csv");
    ok(&["gen-data", "--kind", "overlay", "--source", s(&src), "--count", "12", "--out", s(&overlay)]);
    assert_eq!(fs::read_to_string(overlay.join("noise.csv")).unwrap().lines().count(), 13);
    assert!(!tes(&["gen-data", "--kind", "overlay", "--out", s(&overlay)]).status.success());
}

#[test]
fn sweep_ablate_and_xcv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("five.json");
    fs::write(&cfg_path, SMALL.replace(r#""toy": {"per_class": 40}"#, r#""toy": {"class_count": 5, "per_class": 30}"#)).unwrap();
    let cfg = s(&cfg_path);

    let sweep = dir.path().join("sweep");
    let stdout = ok(&["sweep-openness", "--config", cfg, "--counts", "0,1,2", "--out", s(&sweep)]);
    assert_eq!(stdout.lines().count(), 4, "{stdout}");
    assert_eq!(fs::read_to_string(sweep.join("sweep.csv")).unwrap().lines().count(), 4);
    assert!(sweep.join("plots/openness.svg").is_file());
    assert!(!tes(&["sweep-openness", "--config", cfg, "--counts", "3", "--out", s(&sweep)]).status.success());

    let abl = dir.path().join("ablate");
    ok(&["ablate", "--config", cfg, "--out", s(&abl)]);
    let header = fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert!(header.starts_with("unknown_classes,openness,OVRN-CD,OVRN-CDU,T/S-CD"), "{header}");

    let x = dir.path().join("xcv");
    let stdout = ok(&["xcv", "--config", cfg, "--taus", "1,2", "--lambdas", "1", "--folds", "1", "--out", s(&x)]);
    assert!(stdout.starts_with("best tau"), "{stdout}");
    assert_eq!(fs::read_to_string(x.join("xcv.csv")).unwrap().lines().count(), 3);
    let res: serde_json::Value = serde_json::from_str(&fs::read_to_string(x.join("xcv.json")).unwrap()).unwrap();
    assert_eq!(res["holdouts"].as_array().unwrap().len(), 1);
}

#[test]
fn configuration_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"coverage": 1.5}"#).unwrap();
    let out = tes(&["run", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("coverage"));

    let missing = tes(&["run", "--config", s(&dir.path().join("nope.json"))]);
    assert!(!missing.status.success());

    let shown = ok(&["show-config", "--seed", "42"]);
    let v: serde_json::Value = serde_json::from_str(&shown).unwrap();
    assert_eq!(v["seed"], 42);
    assert_eq!(v["method"], "tes");
}
