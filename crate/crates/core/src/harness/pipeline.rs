//! The end-to-end experiment: data, teacher, distillation, joint training,
//! calibration, evaluation, and the files written for each.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{DataSource, ExperimentConfig, KnownnessScore};
use super::metrics::{auroc, macro_f1, openness, ClassScores};
use super::svg::{self, Series};
use crate::datagen::{gen_toy, load_dataset, split_known_unknown, stratified_split, LabeledDataset};
use crate::distill::{distill_targets, train_teacher, DistilledTargets, FixedTargets, TeacherTraining, TrainedTeacher};
use crate::error::{Error, Result, StageContext};
use crate::explorer::ExplorerPair;
use crate::nn::{Checkpoint, Model, NetworkSpec, OutputActivation};
use crate::recognition::{calibrate_thresholds_lenient, score_rows, Thresholds};
use crate::student::{joint_train, EpochMetrics, JointConfig, RunRecord, StudentModel};
use crate::{derive_seed, rng_from_seed};

const STREAM_TEACHER: u64 = 11;
const STREAM_STUDENT: u64 = 12;
const STREAM_EXPLORER: u64 = 13;
const STREAM_JOINT: u64 = 14;

/// Training and evaluation sets of one experiment.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Known classes, labeled `0..|Y|`.
    pub train: LabeledDataset,
    pub test_known: LabeledDataset,
    /// Unknown evaluation rows with their original labels.
    pub test_unknown: LabeledDataset,
    /// Distinct labels of `test_unknown`, ascending.
    pub unknown_classes: Vec<usize>,
}

impl PreparedData {
    pub fn class_count(&self) -> usize {
        self.train.class_count
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test_known, test_unknown) = match &cfg.data {
        DataSource::Toy {
            toy,
            known_classes,
            test_fraction,
        } => {
            let full = gen_toy(toy)?;
            let split = split_known_unknown(&full, known_classes)?;
            let (train, test_known) = stratified_split(&split.known, *test_fraction, derive_seed(toy.seed, 1))?;
            let test_unknown = if *test_fraction > 0.0 {
                stratified_split(&split.unknown, *test_fraction, derive_seed(toy.seed, 2))?.1
            } else {
                split.unknown
            };
            (train, test_known, test_unknown)
        }
        DataSource::Files {
            train,
            test_known,
            test_unknown,
        } => {
            let train = load_dataset(train)?;
            let mut known = load_dataset(test_known)?;
            if known.class_count > train.class_count {
                return Err(Error::invalid("known test set has labels absent from the training set"));
            }
            known.class_count = train.class_count;
            let unknown = match test_unknown {
                Some(p) => load_dataset(p)?,
                None => LabeledDataset::empty(train.dim(), 0),
            };
            (train, known, unknown)
        }
    };
    train.validate_for_training()?;
    if test_known.dim() != train.dim() || (!test_unknown.is_empty() && test_unknown.dim() != train.dim()) {
        return Err(Error::dim("evaluation sets and training set differ in feature count"));
    }
    let unknown_classes: BTreeSet<usize> = test_unknown.labels.iter().copied().collect();
    Ok(PreparedData {
        train,
        test_known,
        test_unknown,
        unknown_classes: unknown_classes.into_iter().collect(),
    })
}

pub fn teacher_spec(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<NetworkSpec> {
    NetworkSpec::mlp(
        train.dim(),
        &cfg.arch.teacher_hidden,
        train.class_count,
        cfg.arch.leak,
        OutputActivation::Softmax,
    )
}

pub fn fit_teacher(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<TrainedTeacher> {
    let opts = TeacherTraining {
        epochs: cfg.teacher_epochs,
        batch_size: cfg.batch_size,
        adam: cfg.adam.teacher,
        seed: derive_seed(cfg.seed, STREAM_TEACHER),
    };
    train_teacher(train, &teacher_spec(cfg, train)?, &opts)
}

/// Distilled targets when a teacher is given, one-hot targets otherwise.
pub fn make_targets(cfg: &ExperimentConfig, teacher: Option<&Model>, train: &LabeledDataset) -> Result<DistilledTargets> {
    match teacher {
        Some(t) => distill_targets(t, train, &cfg.distill),
        None => Ok(DistilledTargets::hard(train)),
    }
}

pub fn init_student(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<StudentModel> {
    StudentModel::new(
        train.dim(),
        &cfg.arch.student_trunk,
        &cfg.arch.student_head,
        train.class_count,
        cfg.arch.leak,
        &mut rng_from_seed(derive_seed(cfg.seed, STREAM_STUDENT)),
    )
}

pub fn init_explorer(cfg: &ExperimentConfig, data_dim: usize) -> Result<ExplorerPair> {
    let mut pair = ExplorerPair::new(
        data_dim,
        cfg.arch.latent_dim,
        &cfg.arch.generator_hidden,
        &cfg.arch.discriminator_hidden,
        cfg.arch.leak,
        cfg.lambda,
        &mut rng_from_seed(derive_seed(cfg.seed, STREAM_EXPLORER)),
    )?;
    pair.non_saturating = cfg.non_saturating;
    Ok(pair)
}

pub fn joint_config(cfg: &ExperimentConfig) -> JointConfig {
    JointConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        q_min: cfg.distill.q_min,
        use_explorer: cfg.method.uses_explorer(),
        adam_student: cfg.adam.student,
        adam_generator: cfg.adam.generator,
        adam_discriminator: cfg.adam.discriminator,
        probe_count: cfg.probe_count,
        keep_probe_samples: true,
        snapshot_every: cfg.snapshot_every,
    }
}

/// Student, explorer (if the method uses one) and the joint-training record.
pub struct JointResult {
    pub student: StudentModel,
    pub explorer: Option<ExplorerPair>,
    pub record: RunRecord,
}

pub fn fit_joint(cfg: &ExperimentConfig, targets: DistilledTargets, train: &LabeledDataset) -> Result<JointResult> {
    let mut student = init_student(cfg, train)?;
    let mut explorer = if cfg.method.uses_explorer() {
        Some(init_explorer(cfg, train.dim())?)
    } else {
        None
    };
    let record = joint_train(
        &FixedTargets(targets),
        &mut student,
        explorer.as_mut(),
        train,
        &joint_config(cfg),
        derive_seed(cfg.seed, STREAM_JOINT),
    )?;
    Ok(JointResult {
        student,
        explorer,
        record,
    })
}

/// Everything trained for one configuration.
pub struct TrainedSystem {
    pub teacher: Option<TrainedTeacher>,
    pub targets: DistilledTargets,
    pub joint: JointResult,
}

pub fn train_system(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<TrainedSystem> {
    cfg.validate()?;
    let teacher = if cfg.method.uses_teacher() {
        Some(fit_teacher(cfg, train).stage("teacher")?)
    } else {
        None
    };
    let targets = make_targets(cfg, teacher.as_ref().map(|t| &t.model), train).stage("distill")?;
    let joint = fit_joint(cfg, targets.clone(), train).stage("joint")?;
    Ok(TrainedSystem { teacher, targets, joint })
}

/// Thresholds for the configured rule; see
/// [`calibrate_thresholds_lenient`] for the second value.
pub fn calibrate(cfg: &ExperimentConfig, student: &StudentModel, train: &LabeledDataset) -> Result<(Thresholds, Vec<usize>)> {
    calibrate_thresholds_lenient(student, train, cfg.coverage, cfg.use_uncertainty)
}

/// Student scores on the evaluation rows, computed once and reused for
/// both decision rules and for every unknown subset.
#[derive(Debug, Clone)]
pub struct ScoredTest {
    pub class_count: usize,
    pub cds: Vec<Vec<f64>>,
    pub p_u: Vec<f64>,
    pub knownness: Vec<f64>,
    /// `0..|Y|`, or `|Y|` for unknown rows.
    pub truth: Vec<usize>,
    /// Original label of unknown rows.
    pub origin: Vec<Option<usize>>,
}

impl ScoredTest {
    /// Known rows plus the unknown rows whose original label is in `classes`.
    pub fn restrict(&self, classes: &[usize]) -> ScoredTest {
        let keep: Vec<usize> = (0..self.truth.len())
            .filter(|&i| self.origin[i].is_none_or(|o| classes.contains(&o)))
            .collect();
        ScoredTest {
            class_count: self.class_count,
            cds: keep.iter().map(|&i| self.cds[i].clone()).collect(),
            p_u: keep.iter().map(|&i| self.p_u[i]).collect(),
            knownness: keep.iter().map(|&i| self.knownness[i]).collect(),
            truth: keep.iter().map(|&i| self.truth[i]).collect(),
            origin: keep.iter().map(|&i| self.origin[i]).collect(),
        }
    }

    pub fn unknown_class_count(&self) -> usize {
        self.origin.iter().flatten().collect::<BTreeSet<_>>().len()
    }
}

pub fn score_test(student: &StudentModel, data: &PreparedData, score: KnownnessScore) -> Result<ScoredTest> {
    let k = data.class_count();
    let mut s = ScoredTest {
        class_count: k,
        cds: Vec::new(),
        p_u: Vec::new(),
        knownness: Vec::new(),
        truth: Vec::new(),
        origin: Vec::new(),
    };
    for (set, unknown) in [(&data.test_known, false), (&data.test_unknown, true)] {
        if set.is_empty() {
            continue;
        }
        let out = student.predict(&set.features)?;
        let (cds, p_u) = score_rows(&out);
        for (i, (c, pu)) in cds.into_iter().zip(p_u).enumerate() {
            s.knownness.push(score.score(&c, out.probs.row(i)));
            s.cds.push(c);
            s.p_u.push(pu);
            if unknown {
                s.truth.push(k);
                s.origin.push(Some(set.labels[i]));
            } else {
                s.truth.push(set.labels[i]);
                s.origin.push(None);
            }
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// `CD` (collective decision) or `CDU` (with the uncertainty bound).
    pub rule: String,
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    /// Mean over classes that occur in the predictions or the truth.
    pub macro_f1_present: f64,
    /// Known versus unknown; absent without both kinds of rows.
    pub auroc: Option<f64>,
    pub openness: f64,
    /// `confusion[truth][pred]`, the last index being unknown.
    pub confusion: Vec<Vec<usize>>,
    pub known_rows: usize,
    pub unknown_rows: usize,
    pub unknown_classes: usize,
}

pub fn rule_name(t: &Thresholds) -> &'static str {
    if t.use_uncertainty {
        "CDU"
    } else {
        "CD"
    }
}

pub fn evaluate_scored(scored: &ScoredTest, thresholds: &Thresholds) -> Result<EvalReport> {
    let k = scored.class_count;
    if thresholds.class_count() != k {
        return Err(Error::dim("thresholds and evaluation data disagree on the class count"));
    }
    let preds: Vec<usize> = scored.cds.iter().zip(&scored.p_u).map(|(c, &p)| thresholds.decide(c, p)).collect();
    let f1 = macro_f1(&preds, &scored.truth, k + 1)?;
    let is_known: Vec<bool> = scored.truth.iter().map(|&t| t < k).collect();
    let known_rows = is_known.iter().filter(|&&b| b).count();
    let unknown_rows = is_known.len() - known_rows;
    let auc = if known_rows > 0 && unknown_rows > 0 {
        Some(auroc(&scored.knownness, &is_known)?)
    } else {
        None
    };
    let u = scored.unknown_class_count();
    Ok(EvalReport {
        rule: rule_name(thresholds).into(),
        macro_f1_present: f1.macro_f1_present(),
        per_class: f1.per_class,
        macro_f1: f1.macro_f1,
        auroc: auc,
        openness: openness(k, k + u, k)?,
        confusion: f1.confusion,
        known_rows,
        unknown_rows,
        unknown_classes: u,
    })
}

/// The same cutoffs with the uncertainty bound switched on or off.
pub fn with_rule(t: &Thresholds, use_uncertainty: bool) -> Thresholds {
    Thresholds {
        use_uncertainty,
        ..t.clone()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub method: String,
    pub seed: u64,
    pub known_classes: usize,
    pub unknown_classes: Vec<usize>,
    pub openness: f64,
    /// Rule of the thresholds file: `CD` or `CDU`.
    pub headline: String,
    pub cd: EvalReport,
    pub cdu: EvalReport,
    /// Classes the student never predicts on their own training rows; they
    /// are never accepted.
    pub uncalibrated_classes: Vec<usize>,
    pub teacher_losses: Vec<f64>,
    /// First epoch whose training used at least one active unknown.
    pub first_active_epoch: Option<usize>,
    pub epochs: Vec<EpochMetrics>,
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub data: PreparedData,
    pub system: TrainedSystem,
    pub thresholds: Thresholds,
    pub scored: ScoredTest,
}

/// Trains, calibrates and evaluates without touching the file system.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg).stage("data")?;
    let system = train_system(cfg, &data.train)?;
    finish(cfg, data, system)
}

fn finish(cfg: &ExperimentConfig, data: PreparedData, system: TrainedSystem) -> Result<ExperimentOutcome> {
    let student = &system.joint.student;
    let (thresholds, uncalibrated) = calibrate(cfg, student, &data.train).stage("calibrate")?;
    let scored = score_test(student, &data, cfg.auroc_score).stage("evaluate")?;
    let cd = evaluate_scored(&scored, &with_rule(&thresholds, false)).stage("evaluate")?;
    let cdu = evaluate_scored(&scored, &with_rule(&thresholds, true)).stage("evaluate")?;
    let record = &system.joint.record;
    let report = ExperimentReport {
        method: cfg.method.label().into(),
        seed: cfg.seed,
        known_classes: data.class_count(),
        unknown_classes: data.unknown_classes.clone(),
        openness: cd.openness,
        headline: rule_name(&thresholds).into(),
        cd,
        cdu,
        uncalibrated_classes: uncalibrated,
        teacher_losses: system.teacher.as_ref().map(|t| t.epoch_losses.clone()).unwrap_or_default(),
        first_active_epoch: record.epochs.iter().find(|e| e.active_count > 0).map(|e| e.epoch),
        epochs: record.epochs.clone(),
    };
    Ok(ExperimentOutcome {
        report,
        data,
        system,
        thresholds,
        scored,
    })
}

/// Output directory layout.
#[derive(Debug, Clone)]
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["checkpoints", "fakes", "plots"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(OutDir { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(format!("{name}.svg"))
    }
}

pub fn write_teacher(out: &OutDir, cfg: &ExperimentConfig, teacher: &TrainedTeacher) -> Result<()> {
    Checkpoint::single("teacher", teacher.model.clone(), cfg.adam.teacher).save(out.checkpoint("teacher"))?;
    let mut s = String::from("epoch,loss\n");
    for (i, l) in teacher.epoch_losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    fs::write(out.path("teacher_losses.csv"), s)?;
    Ok(())
}

/// Checkpoints, `metrics.csv`, per-epoch fake dumps and training plots.
pub fn write_joint(out: &OutDir, cfg: &ExperimentConfig, joint: &JointResult, train: &LabeledDataset) -> Result<()> {
    joint.student.to_checkpoint(cfg.adam.student).save(out.checkpoint("student"))?;
    if let Some(pair) = &joint.explorer {
        pair.to_checkpoint(cfg.adam.generator).save(out.checkpoint("explorer"))?;
    }
    for snap in &joint.record.snapshots {
        snap.student.save(out.checkpoint(&format!("student_epoch_{}", snap.epoch)))?;
        if let Some(e) = &snap.explorer {
            e.save(out.checkpoint(&format!("explorer_epoch_{}", snap.epoch)))?;
        }
    }
    fs::write(out.path("metrics.csv"), joint.record.metrics_csv())?;

    let plot_fakes = cfg.plot_fakes && train.dim() == 2;
    let real: Vec<(f64, f64)> = train.features.iter_rows().take(2000).map(|r| (r[0], r[1])).collect();
    for probe in &joint.record.probes {
        let mut s = String::from("active");
        for j in 0..probe.samples.cols() {
            let _ = write!(s, ",f{j}");
        }
        s.push('\n');
        for (row, &a) in probe.samples.iter_rows().zip(&probe.active) {
            s.push_str(if a { "1" } else { "0" });
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        fs::write(out.root.join("fakes").join(format!("epoch_{}.csv", probe.epoch)), s)?;
        if plot_fakes {
            let (mut act, mut inact) = (Vec::new(), Vec::new());
            for (row, &a) in probe.samples.iter_rows().zip(&probe.active) {
                if a { &mut act } else { &mut inact }.push((row[0], row[1]));
            }
            let svg = svg::scatter(
                &format!("generated samples, epoch {}", probe.epoch),
                &[
                    Series::new("real", real.clone()),
                    Series::new("generated", inact),
                    Series::new("active unknown", act),
                ],
            );
            fs::write(out.plot(&format!("fakes_epoch_{}", probe.epoch)), svg)?;
        }
    }

    let epochs = &joint.record.epochs;
    if !epochs.is_empty() {
        let curve = |f: fn(&EpochMetrics) -> f64| epochs.iter().map(|e| (e.epoch as f64, f(e))).collect::<Vec<_>>();
        let mut series = vec![
            Series::new("student real", curve(|e| e.s_real_loss)),
            Series::new("student fake", curve(|e| e.s_fake_loss)),
        ];
        if joint.explorer.is_some() {
            series.push(Series::new("discriminator", curve(|e| e.d_loss)));
            series.push(Series::new("generator adv", curve(|e| e.g_adv_loss)));
            series.push(Series::new("generator student", curve(|e| e.g_student_loss)));
        }
        fs::write(out.plot("losses"), svg::line_chart("training losses", "epoch", "loss", &series))?;
        let active = vec![
            Series::new("during training", curve(|e| e.active_count as f64)),
            Series::new("probe", curve(|e| e.probe_active as f64)),
        ];
        fs::write(
            out.plot("active_unknowns"),
            svg::line_chart("active unknown samples", "epoch", "count", &active),
        )?;
    }
    Ok(())
}

pub fn write_report(out: &OutDir, report: &ExperimentReport) -> Result<()> {
    fs::write(out.path("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[derive(Serialize)]
struct FailureReport<'a> {
    status: &'static str,
    stage: &'a str,
    error: String,
}

/// Records a failed run in `report.json` next to whatever was persisted.
pub fn write_failure(out: &OutDir, err: &Error) -> Result<()> {
    let stage = match err {
        Error::Stage { stage, .. } => stage,
        _ => "setup",
    };
    let f = FailureReport {
        status: "failed",
        stage,
        error: err.to_string(),
    };
    fs::write(out.path("report.json"), serde_json::to_string_pretty(&f)?)?;
    Ok(())
}

/// Runs the whole pipeline and writes every artifact under `out`. Each
/// stage's output is written as soon as the stage finishes; on failure
/// `report.json` names the failed stage.
pub fn run_experiment(cfg: &ExperimentConfig, out: impl AsRef<Path>) -> Result<ExperimentOutcome> {
    let out = OutDir::create(out.as_ref())?;
    let result = run_stages(cfg, &out);
    if let Err(e) = &result {
        write_failure(&out, e)?;
    }
    result
}

fn run_stages(cfg: &ExperimentConfig, out: &OutDir) -> Result<ExperimentOutcome> {
    cfg.validate().stage("config")?;
    fs::write(out.path("config.json"), cfg.to_json()?)?;
    let data = prepare_data(cfg).stage("data")?;
    let teacher = if cfg.method.uses_teacher() {
        let t = fit_teacher(cfg, &data.train).stage("teacher")?;
        write_teacher(out, cfg, &t).stage("teacher")?;
        Some(t)
    } else {
        None
    };
    let targets = make_targets(cfg, teacher.as_ref().map(|t| &t.model), &data.train).stage("distill")?;
    targets.save_csv(out.path("targets.csv")).stage("distill")?;
    let joint = fit_joint(cfg, targets.clone(), &data.train).stage("joint")?;
    write_joint(out, cfg, &joint, &data.train).stage("joint")?;
    let outcome = finish(cfg, data, TrainedSystem { teacher, targets, joint })?;
    outcome.thresholds.save(out.path("thresholds.txt")).stage("calibrate")?;
    let preds: Vec<_> = outcome
        .scored
        .cds
        .iter()
        .zip(&outcome.scored.p_u)
        .map(|(c, &p)| crate::recognition::Prediction {
            label: outcome.thresholds.decide(c, p),
            cds: c.clone(),
            p_u: p,
        })
        .collect();
    fs::write(out.path("predictions.csv"), crate::recognition::predictions_csv(&preds))
        .map_err(Error::from)
        .stage("evaluate")?;
    write_report(out, &outcome.report).stage("report")?;
    Ok(outcome)
}
