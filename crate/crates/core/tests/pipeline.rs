//! End-to-end harness runs on small toy configurations.

use std::fs;
use std::path::Path;

use tes_osr::datagen::{gen_toy, save_dataset, ToySpec};
use tes_osr::harness::pipeline::{prepare_data, run_in_memory};
use tes_osr::harness::xcv::cross_class_validate;
use tes_osr::harness::{ablate, run_experiment, sweep_openness, DataSource, ExperimentConfig, Method};
use tes_osr::nn::{Checkpoint, Tensor};
use tes_osr::recognition::Thresholds;
use tes_osr::student::StudentModel;
use tes_osr::Error;

fn toy_cfg(classes: usize, known: Vec<usize>, per_class: usize) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Toy {
            toy: ToySpec {
                class_count: classes,
                per_class,
                ..ToySpec::default()
            },
            known_classes: known,
            test_fraction: 0.25,
        },
        teacher_epochs: 3,
        epochs: 3,
        batch_size: 32,
        probe_count: 40,
        ..ExperimentConfig::default()
    }
}

fn small() -> ExperimentConfig {
    toy_cfg(4, vec![0, 1, 2], 40)
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        snapshot_every: 2,
        ..small()
    };
    let outcome = run_experiment(&cfg, dir.path()).unwrap();
    let root = dir.path();
    for f in [
        "config.json",
        "metrics.csv",
        "report.json",
        "thresholds.txt",
        "targets.csv",
        "predictions.csv",
        "teacher_losses.csv",
        "checkpoints/teacher.ckpt",
        "checkpoints/student.ckpt",
        "checkpoints/explorer.ckpt",
        "checkpoints/student_epoch_2.ckpt",
        "fakes/epoch_1.csv",
        "fakes/epoch_3.csv",
        "plots/fakes_epoch_3.svg",
        "plots/losses.svg",
        "plots/active_unknowns.svg",
    ] {
        assert!(root.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(root.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,d_loss,g_adv_loss,g_student_loss,s_real_loss,s_fake_loss,active_count"
    );
    assert_eq!(lines.count(), 3);
    let fakes = fs::read_to_string(root.join("fakes/epoch_2.csv")).unwrap();
    assert_eq!(fakes.lines().count(), 41);

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "T/E/S");
    for key in ["openness", "cd", "cdu"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    let f1 = report["cd"]["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    let auroc = report["cd"]["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));

    // Confusion rows add up to the test rows of each class.
    let r = &outcome.report.cd;
    let total: usize = r.confusion.iter().flatten().sum();
    assert_eq!(total, r.known_rows + r.unknown_rows);
    for (c, row) in r.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), r.per_class[c].support);
    }

    let t = Thresholds::load(root.join("thresholds.txt")).unwrap();
    assert_eq!(t, outcome.thresholds);
}

#[test]
fn identical_configs_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&small(), a.path()).unwrap();
    run_experiment(&small(), b.path()).unwrap();
    for f in ["metrics.csv", "report.json", "thresholds.txt", "targets.csv", "fakes/epoch_3.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let other = tempfile::tempdir().unwrap();
    run_experiment(&ExperimentConfig { seed: 1, ..small() }, other.path()).unwrap();
    assert_ne!(
        fs::read(a.path().join("metrics.csv")).unwrap(),
        fs::read(other.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn saved_student_reproduces_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&small(), dir.path()).unwrap();
    let student = &outcome.system.joint.student;
    let loaded = StudentModel::from_checkpoint(Checkpoint::load(dir.path().join("checkpoints/student.ckpt")).unwrap()).unwrap();
    let probe = Tensor::matrix(5, 2, vec![0.0, 0.0, 0.5, 0.5, 1.0, 0.2, 0.3, 0.9, 0.7, 0.1]).unwrap();
    let a = student.predict(&probe).unwrap();
    let b = loaded.predict(&probe).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.probs, b.probs);

    let teacher = Checkpoint::load(dir.path().join("checkpoints/teacher.ckpt")).unwrap();
    let t0 = &outcome.system.teacher.as_ref().unwrap().model;
    assert_eq!(teacher.get("teacher").unwrap().predict(&probe).unwrap(), t0.predict(&probe).unwrap());
}

#[test]
fn untrained_models_still_report() {
    let cfg = ExperimentConfig {
        teacher_epochs: 0,
        epochs: 0,
        ..small()
    };
    let o = run_in_memory(&cfg).unwrap();
    assert!(o.report.epochs.is_empty());
    assert!((0.0..=1.0).contains(&o.report.cd.macro_f1));
}

#[test]
fn failing_stage_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "label,f0,f1\n0,0.1,0.2\n1,0.3,oops\n").unwrap();
    let cfg = ExperimentConfig {
        data: DataSource::Files {
            train: bad.clone(),
            test_known: bad.clone(),
            test_unknown: None,
        },
        ..small()
    };
    let out = dir.path().join("out");
    let Err(err) = run_experiment(&cfg, &out) else {
        panic!("a malformed training file must fail the run");
    };
    match &err {
        Error::Stage { stage, source } => {
            assert_eq!(*stage, "data");
            assert!(matches!(**source, Error::Parse { line: 3, .. }), "{source}");
        }
        other => panic!("unexpected error {other}"),
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "failed");
    assert_eq!(report["stage"], "data");
    assert!(out.join("config.json").is_file());
}

#[test]
fn file_sources_match_the_toy_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let d = prepare_data(&cfg).unwrap();
    let p = |n: &str| dir.path().join(n);
    save_dataset(&d.train, p("train.csv")).unwrap();
    save_dataset(&d.test_known, p("known.csv")).unwrap();
    save_dataset(&d.test_unknown, p("unknown.csv")).unwrap();
    let files = ExperimentConfig {
        data: DataSource::Files {
            train: p("train.csv"),
            test_known: p("known.csv"),
            test_unknown: Some(p("unknown.csv")),
        },
        ..cfg.clone()
    };
    let a = run_in_memory(&cfg).unwrap();
    let b = run_in_memory(&files).unwrap();
    assert_eq!(a.report.epochs, b.report.epochs);
    assert_eq!(a.report.cd.confusion, b.report.cd.confusion);
}

#[test]
fn openness_sweep_grows_with_the_unknown_pool() {
    let cfg = toy_cfg(20, vec![0, 1, 2, 3], 12);
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_openness(&cfg, &[1, 4, 16], Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[0].openness < w[1].openness));
    assert_eq!(rows.iter().map(|r| r.unknown_classes).collect::<Vec<_>>(), vec![1, 4, 16]);
    assert!(dir.path().join("sweep.csv").is_file());
    assert!(dir.path().join("plots/openness.svg").is_file());
    assert_eq!(rows, sweep_openness(&cfg, &[1, 4, 16], None).unwrap());

    let closed = sweep_openness(&cfg, &[0], None).unwrap();
    assert_eq!(closed[0].openness, 0.0);
    assert!(closed[0].auroc.is_none());
    assert!(sweep_openness(&cfg, &[17], None).is_err());
}

#[test]
fn ablation_covers_every_method_and_rule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_cfg(5, vec![0, 1, 2], 30);
    let table = ablate(&cfg, None, Some(dir.path())).unwrap();
    assert_eq!(table.unknown_classes, vec![1, 2]);
    for m in Method::ALL {
        for rule in ["CD", "CDU"] {
            let col = table.column(&format!("{}-{rule}", m.label())).unwrap();
            assert_eq!(col.len(), 2);
        }
    }
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "unknown_classes,openness,OVRN-CD,OVRN-CDU,T/S-CD,T/S-CDU,E/S-CD,E/S-CDU,T/E/S-CD,T/E/S-CDU"
    );
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("plots/ablation.svg").is_file());
}

#[test]
fn cross_class_validation_is_deterministic() {
    let cfg = ExperimentConfig {
        teacher_epochs: 2,
        epochs: 2,
        ..toy_cfg(4, vec![0, 1, 2, 3], 25)
    };
    let data = gen_toy(&ToySpec {
        per_class: 25,
        ..ToySpec::default()
    })
    .unwrap();
    let grid = [(1.0, 0.1), (2.0, 1.0), (5.0, 10.0)];
    let a = cross_class_validate(&data, &grid, 2, &cfg).unwrap();
    let b = cross_class_validate(&data, &grid, 2, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.holdouts.len(), 2);
    assert!(a.holdouts.iter().all(|h| h.len() == 1));
    assert!(grid.contains(&a.best));

    let one = cross_class_validate(&data, &[(2.0, 1.0)], 2, &cfg).unwrap();
    let twice = cross_class_validate(&data, &[(2.0, 1.0), (2.0, 1.0)], 2, &cfg).unwrap();
    assert_eq!(one.best, (2.0, 1.0));
    assert_eq!(one.best, twice.best);
    assert_eq!(one.scores[0], twice.scores[1]);

    let three = gen_toy(&ToySpec {
        class_count: 2,
        per_class: 10,
        ..ToySpec::default()
    })
    .unwrap();
    assert!(cross_class_validate(&three, &grid, 2, &cfg).is_err());
}

#[test]
fn config_files_resolve_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_toy(&ToySpec {
        per_class: 10,
        ..ToySpec::default()
    })
    .unwrap();
    save_dataset(&data, dir.path().join("all.csv")).unwrap();
    let json = r#"{"data": {"kind": "files", "train": "all.csv", "test_known": "all.csv"}, "epochs": 1}"#;
    let path = dir.path().join("cfg.json");
    fs::write(&path, json).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    match &cfg.data {
        DataSource::Files { train, .. } => assert_eq!(train, &dir.path().join("all.csv")),
        other => panic!("{other:?}"),
    }
    assert!(Path::new(&dir.path().join("all.csv")).is_file());
    assert_eq!(cfg.epochs, 1);
    assert_eq!(cfg.batch_size, ExperimentConfig::default().batch_size);
}
