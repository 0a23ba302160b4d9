//! `tes`: run teacher/explorer/student open set recognition experiments.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tes_osr::datagen::{gen_noise, gen_toy, load_dataset, save_dataset, NoiseMode, NoiseSpec};
use tes_osr::distill::DistilledTargets;
use tes_osr::harness::pipeline::{
    self, calibrate, evaluate_scored, fit_joint, fit_teacher, make_targets, prepare_data, score_test, with_rule,
    write_joint, write_teacher, OutDir,
};
use tes_osr::harness::sweep::{default_counts, sweep_openness};
use tes_osr::harness::xcv::cross_class_validate;
use tes_osr::harness::{ablate, DataSource, ExperimentConfig, Method};
use tes_osr::nn::Checkpoint;
use tes_osr::recognition::{predictions_csv, predictions_from_output, Thresholds};
use tes_osr::student::StudentModel;

#[derive(Parser)]
#[command(name = "tes", version, about = "Teacher-explorer-student open set recognition")]
struct Cli {
    /// Experiment configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the toy dataset and its train/test split, or a noise set.
    GenData(GenData),
    /// Train the teacher and save `checkpoints/teacher.ckpt`.
    TrainTeacher,
    /// Compute distilled targets from a saved teacher into `targets.csv`.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Joint explorer/student training.
    Train {
        /// Targets file; computed from the configuration when omitted.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Calibrate decision thresholds of a saved student into `thresholds.txt`.
    Calibrate {
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Evaluate a saved student and thresholds on the configured test sets.
    Eval {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Macro F1 of one trained model against growing unknown sets.
    SweepOpenness {
        /// Comma-separated unknown class counts; all from 1 to the pool size by default.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Train and evaluate every method from one configuration.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Cross-class validation over temperature and explorer weight.
    Xcv {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 5.0])]
        taus: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 1.0, 10.0])]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        folds: usize,
    },
    /// The whole pipeline: teacher, distillation, joint training, calibration, evaluation.
    Run,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum, default_value_t = DataKind::Toy)]
    kind: DataKind,
    /// Rows of noise to generate.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Feature count of pure noise; taken from the overlay source otherwise.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Dataset whose rows are blended with noise (overlay kind).
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Label given to every noise row.
    #[arg(long, default_value_t = 0)]
    label: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Toy,
    Noise,
    Overlay,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(p: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    p.clone().unwrap_or(default)
}

fn load_student(path: &Path) -> Result<StudentModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(StudentModel::from_checkpoint(ck)?)
}

fn gen_data(cli: &Cli, args: &GenData) -> Result<()> {
    let out = OutDir::create(&cli.out)?;
    match args.kind {
        DataKind::Toy => {
            let cfg = load_config(cli)?;
            let DataSource::Toy { toy, .. } = &cfg.data else {
                bail!("gen-data toy needs a toy data source in the configuration");
            };
            let full = gen_toy(toy)?;
            save_dataset(&full, out.path("toy.csv"))?;
            let d = prepare_data(&cfg)?;
            save_dataset(&d.train, out.path("train.csv"))?;
            save_dataset(&d.test_known, out.path("test_known.csv"))?;
            save_dataset(&d.test_unknown, out.path("test_unknown.csv"))?;
            let files = ExperimentConfig {
                data: DataSource::Files {
                    train: "train.csv".into(),
                    test_known: "test_known.csv".into(),
                    test_unknown: Some("test_unknown.csv".into()),
                },
                ..cfg
            };
            fs::write(out.path("config_files.json"), files.to_json()?)?;
            println!(
                "wrote {} rows ({} train, {} known test, {} unknown test) to {}",
                full.len(),
                d.train.len(),
                d.test_known.len(),
                d.test_unknown.len(),
                out.root.display()
            );
        }
        DataKind::Noise | DataKind::Overlay => {
            let (mode, source) = match args.kind {
                DataKind::Noise => (NoiseMode::PureNoise, None),
                _ => {
                    let Some(src) = &args.source else {
                        bail!("overlay noise needs --source");
                    };
                    (NoiseMode::Overlay { alpha: args.alpha }, Some(load_dataset(src)?))
                }
            };
            let dim = source.as_ref().map_or(args.dim, |s| s.dim());
            let spec = NoiseSpec {
                dim,
                count: args.count,
                mode,
                overlay_source: source,
                seed: cli.seed.unwrap_or(0),
                label: args.label,
            };
            let noise = gen_noise(&spec)?;
            save_dataset(&noise, out.path("noise.csv"))?;
            println!("wrote {} noise rows to {}", noise.len(), out.path("noise.csv").display());
        }
    }
    Ok(())
}

fn train(cli: &Cli, targets: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = OutDir::create(&cli.out)?;
    let data = prepare_data(&cfg)?;
    let targets = match targets {
        Some(p) => DistilledTargets::load_csv(p, data.class_count())?,
        None => {
            let teacher = if cfg.method.uses_teacher() {
                let t = fit_teacher(&cfg, &data.train)?;
                write_teacher(&out, &cfg, &t)?;
                Some(t.model)
            } else {
                None
            };
            make_targets(&cfg, teacher.as_ref(), &data.train)?
        }
    };
    let joint = fit_joint(&cfg, targets, &data.train)?;
    write_joint(&out, &cfg, &joint, &data.train)?;
    let first = joint.record.epochs.iter().find(|e| e.active_count > 0).map(|e| e.epoch);
    println!(
        "{} trained for {} epochs; first epoch with active unknowns: {}",
        cfg.method.label(),
        joint.record.epochs.len(),
        first.map_or("none".into(), |e| e.to_string())
    );
    Ok(())
}

fn eval(cli: &Cli, student: &Option<PathBuf>, thresholds: &Option<PathBuf>) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = OutDir::create(&cli.out)?;
    let data = prepare_data(&cfg)?;
    let student = load_student(&or_default(student, out.checkpoint("student")))?;
    let t = Thresholds::load(or_default(thresholds, out.path("thresholds.txt")))?;
    let scored = score_test(&student, &data, cfg.auroc_score)?;
    let cd = evaluate_scored(&scored, &with_rule(&t, false))?;
    let cdu = evaluate_scored(&scored, &with_rule(&t, true))?;
    let report = serde_json::json!({
        "method": cfg.method.label(),
        "headline": pipeline::rule_name(&t),
        "openness": cd.openness,
        "cd": cd,
        "cdu": cdu,
    });
    fs::write(out.path("report.json"), serde_json::to_string_pretty(&report)?)?;
    let mut x = data.test_known.features.clone();
    if !data.test_unknown.is_empty() {
        x = tes_osr::nn::Tensor::vstack(&[&x, &data.test_unknown.features])?;
    }
    let preds = predictions_from_output(&student.predict(&x)?, &t);
    fs::write(out.path("predictions.csv"), predictions_csv(&preds))?;
    println!(
        "macro F1: CD {:.4}, CDU {:.4}; AUROC {}",
        cd.macro_f1,
        cdu.macro_f1,
        cd.auroc.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(args) => gen_data(&cli, args)?,
        Command::TrainTeacher => {
            let cfg = load_config(&cli)?;
            let out = OutDir::create(&cli.out)?;
            let data = prepare_data(&cfg)?;
            let t = fit_teacher(&cfg, &data.train)?;
            write_teacher(&out, &cfg, &t)?;
            println!(
                "teacher trained for {} epochs, final loss {}",
                t.epoch_losses.len(),
                t.epoch_losses.last().map_or("n/a".into(), |l| format!("{l:.6}"))
            );
        }
        Command::Distill { teacher } => {
            let cfg = load_config(&cli)?;
            let out = OutDir::create(&cli.out)?;
            let data = prepare_data(&cfg)?;
            let mut ck = Checkpoint::load(or_default(teacher, out.checkpoint("teacher")))?;
            let model = ck.take("teacher")?;
            let targets = make_targets(&cfg, Some(&model), &data.train)?;
            targets.save_csv(out.path("targets.csv"))?;
            println!("wrote {} targets", targets.len());
        }
        Command::Train { targets } => train(&cli, targets)?,
        Command::Calibrate { student } => {
            let cfg = load_config(&cli)?;
            let out = OutDir::create(&cli.out)?;
            let data = prepare_data(&cfg)?;
            let student = load_student(&or_default(student, out.checkpoint("student")))?;
            let (t, unusable) = calibrate(&cfg, &student, &data.train)?;
            t.save(out.path("thresholds.txt"))?;
            if !unusable.is_empty() {
                eprintln!("warning: classes {unusable:?} are never predicted and will always be rejected");
            }
            println!("wrote {}", out.path("thresholds.txt").display());
        }
        Command::Eval { student, thresholds } => eval(&cli, student, thresholds)?,
        Command::SweepOpenness { counts } => {
            let cfg = load_config(&cli)?;
            let counts = if counts.is_empty() {
                default_counts(prepare_data(&cfg)?.unknown_classes.len())
            } else {
                counts.clone()
            };
            let rows = sweep_openness(&cfg, &counts, Some(&cli.out))?;
            println!("unknown_classes openness macro_f1_cd macro_f1_cdu");
            for r in rows {
                println!("{} {:.4} {:.4} {:.4}", r.unknown_classes, r.openness, r.macro_f1_cd, r.macro_f1_cdu);
            }
        }
        Command::Ablate { counts } => {
            let cfg = load_config(&cli)?;
            let counts = (!counts.is_empty()).then_some(counts.as_slice());
            let table = ablate(&cfg, counts, Some(&cli.out))?;
            print!("{}", table.to_csv());
        }
        Command::Xcv { taus, lambdas, folds } => {
            let cfg = load_config(&cli)?;
            let out = OutDir::create(&cli.out)?;
            let data = prepare_data(&cfg)?;
            let grid: Vec<(f64, f64)> = taus.iter().flat_map(|&t| lambdas.iter().map(move |&l| (t, l))).collect();
            let res = cross_class_validate(&data.train, &grid, *folds, &ExperimentConfig { method: Method::Tes, ..cfg })?;
            fs::write(out.path("xcv.csv"), res.to_csv())?;
            fs::write(out.path("xcv.json"), serde_json::to_string_pretty(&res)?)?;
            println!("best tau {} lambda {}", res.best.0, res.best.1);
        }
        Command::Run => {
            let cfg = load_config(&cli)?;
            let o = pipeline::run_experiment(&cfg, &cli.out)?;
            let r = &o.report;
            println!(
                "{}: openness {:.4}, macro F1 CD {:.4}, CDU {:.4}, AUROC {}",
                r.method,
                r.openness,
                r.cd.macro_f1,
                r.cdu.macro_f1,
                r.cd.auroc.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
        }
        Command::ShowConfig => {
            let cfg = load_config(&cli)?;
            println!("{}", cfg.to_json()?);
        }
    }
    Ok(())
}
