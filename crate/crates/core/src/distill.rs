//! Teacher training, temperature scaling and hint-extracting distillation.
//!
//! The teacher is an ordinary softmax classifier. After training, each
//! training sample's target-class probability is softened with a
//! temperature and min-max normalized over the correctly classified set;
//! the result becomes a target in `[q_min, 1]` whose complement is assigned
//! to the unknown slot. Misclassified samples get exactly `q_min`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, argmax, categorical_cross_entropy, categorical_cross_entropy_grad, epoch_batches,
    AdamConfig, LayerSpec, Model, NetworkSpec, Tensor,
};
use crate::rng_from_seed;

/// Rows per forward call when scoring whole datasets.
pub(crate) const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub tau: f64,
    pub q_min: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { tau: 2.0, q_min: 0.7 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("temperature {} must be positive", self.tau)));
        }
        validate_q_min(self.q_min)
    }
}

pub(crate) fn validate_q_min(q_min: f64) -> Result<()> {
    if !(q_min > 0.5 && q_min < 1.0) {
        return Err(Error::invalid(format!("q_min {q_min} outside (0.5, 1)")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: Model,
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a softmax classifier with categorical cross-entropy.
pub fn train_teacher(
    data: &LabeledDataset,
    spec: &NetworkSpec,
    opts: &TeacherTraining,
) -> Result<TrainedTeacher> {
    data.validate_for_training()?;
    opts.adam.validate()?;
    if spec.last() != Some(&LayerSpec::Softmax) {
        return Err(Error::invalid("teacher network must end in softmax"));
    }
    if spec.out_dim() != data.class_count || spec.in_dim() != data.dim() {
        return Err(Error::dim(format!(
            "teacher maps {} -> {}, data has {} features and {} classes",
            spec.in_dim(),
            spec.out_dim(),
            data.dim(),
            data.class_count
        )));
    }
    let mut rng = rng_from_seed(opts.seed);
    let mut model = Model::new(spec.clone(), &mut rng)?;
    let one_hot = data.one_hot();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        let batches = epoch_batches(data.len(), opts.batch_size, &mut rng);
        let mut total = 0.0;
        for b in &batches {
            let x = data.features.select_rows(b);
            let t = one_hot.select_rows(b);
            let trace = model.forward(&x)?;
            total += categorical_cross_entropy(trace.output(), &t)?;
            let g = categorical_cross_entropy_grad(trace.output(), &t)?;
            let grads = model.backward(&trace, &g)?;
            adam_step(&mut model, &grads.params, &opts.adam)?;
        }
        epoch_losses.push(total / batches.len().max(1) as f64);
    }
    Ok(TrainedTeacher { model, epoch_losses })
}

/// Softmax of `logits / tau`.
pub fn temperature_scale(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    Ok(crate::nn::softmax(&scaled))
}

/// Teacher logits (pre-softmax) and posteriors for every row.
pub fn teacher_outputs(teacher: &Model, features: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = features.rows();
    let (mut logits, mut probs) = (Vec::new(), Vec::new());
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let trace = teacher.forward(&features.select_rows(chunk))?;
        logits.extend_from_slice(trace.last_dense_output(teacher.spec()).data());
        probs.extend_from_slice(trace.output().data());
    }
    let k = teacher.out_dim();
    Ok((Tensor::matrix(n, k, logits)?, Tensor::matrix(n, k, probs)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// Indices the teacher classifies correctly.
    pub correct: Vec<usize>,
    pub missed: Vec<usize>,
}

pub fn partition_by_correctness(teacher: &Model, data: &LabeledDataset) -> Result<Partition> {
    let (_, probs) = check_and_score(teacher, data)?;
    Ok(partition_from_probs(&probs, &data.labels))
}

fn check_and_score(teacher: &Model, data: &LabeledDataset) -> Result<(Tensor, Tensor)> {
    if teacher.out_dim() != data.class_count {
        return Err(Error::dim(format!(
            "teacher emits {} classes, dataset has {}",
            teacher.out_dim(),
            data.class_count
        )));
    }
    teacher_outputs(teacher, &data.features)
}

fn partition_from_probs(probs: &Tensor, labels: &[usize]) -> Partition {
    let (mut correct, mut missed) = (Vec::new(), Vec::new());
    for (i, row) in probs.iter_rows().enumerate() {
        if argmax(row) == labels[i] {
            correct.push(i);
        } else {
            missed.push(i);
        }
    }
    Partition { correct, missed }
}

/// Soft target of one training sample: known classes first, then the
/// unknown slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledTarget {
    pub index: usize,
    pub target_class: usize,
    pub q_d: Vec<f64>,
}

impl DistilledTarget {
    pub fn new(index: usize, target_class: usize, class_count: usize, q_target: f64) -> Self {
        let mut q_d = vec![0.0; class_count + 1];
        q_d[target_class] = q_target;
        q_d[class_count] = 1.0 - q_target;
        DistilledTarget {
            index,
            target_class,
            q_d,
        }
    }

    pub fn q_target(&self) -> f64 {
        self.q_d[self.target_class]
    }

    pub fn q_unknown(&self) -> f64 {
        *self.q_d.last().expect("unknown slot")
    }
}

/// Targets for every row of a training set, indexed by row.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledTargets {
    pub class_count: usize,
    pub targets: Vec<DistilledTarget>,
}

impl DistilledTargets {
    /// One-hot targets with the unknown slot at zero.
    pub fn hard(data: &LabeledDataset) -> Self {
        DistilledTargets {
            class_count: data.class_count,
            targets: data
                .labels
                .iter()
                .enumerate()
                .map(|(i, &l)| DistilledTarget::new(i, l, data.class_count, 1.0))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&DistilledTarget> {
        self.targets
            .get(index)
            .filter(|t| t.index == index)
            .ok_or_else(|| Error::invalid(format!("no distilled target for sample {index}")))
    }

    /// `|idx| x (|Y|+1)` target matrix for a batch.
    pub fn matrix(&self, idx: &[usize]) -> Result<Tensor> {
        let width = self.class_count + 1;
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&self.get(i)?.q_d);
        }
        Tensor::matrix(idx.len(), width, data)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,target_class,q_target,q_unknown\n");
        for t in &self.targets {
            let _ = writeln!(s, "{},{},{},{}", t.index, t.target_class, t.q_target(), t.q_unknown());
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(text: &str, class_count: usize, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "index,target_class,q_target,q_unknown" => {}
            _ => return Err(perr(1, "expected header index,target_class,q_target,q_unknown".into())),
        }
        let mut targets = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(perr(lineno, format!("expected 4 fields, found {}", f.len())));
            }
            let index: usize = f[0].parse().map_err(|_| perr(lineno, "bad index".into()))?;
            let class: usize = f[1].parse().map_err(|_| perr(lineno, "bad target_class".into()))?;
            let q: f64 = f[2].parse().map_err(|_| perr(lineno, "bad q_target".into()))?;
            let u: f64 = f[3].parse().map_err(|_| perr(lineno, "bad q_unknown".into()))?;
            if class >= class_count || index != targets.len() {
                return Err(perr(lineno, "target class out of range or index out of order".into()));
            }
            let mut t = DistilledTarget::new(index, class, class_count, q);
            t.q_d[class_count] = u;
            targets.push(t);
        }
        Ok(DistilledTargets {
            class_count,
            targets,
        })
    }

    pub fn load_csv(path: impl AsRef<Path>, class_count: usize) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_csv(&fs::read_to_string(path)?, class_count, path)
    }
}

/// Min-max position of `q` within `[lo, hi]`; a degenerate range maps to 1.
fn min_max_position(q: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (q - lo) / (hi - lo)
    } else {
        1.0
    }
}

/// Builds targets from the temperature-scaled target-class probabilities
/// and the teacher's correctness flags.
pub fn distill_from_scores(
    scaled_target_probs: &[f64],
    correct: &[bool],
    labels: &[usize],
    class_count: usize,
    q_min: f64,
) -> Result<DistilledTargets> {
    validate_q_min(q_min)?;
    let n = labels.len();
    if scaled_target_probs.len() != n || correct.len() != n {
        return Err(Error::dim("scores, flags and labels must have equal length"));
    }
    let s_dc = scaled_target_probs.iter().zip(correct).filter(|(_, &c)| c).map(|(&q, _)| q);
    let (lo, hi) = s_dc.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q), hi.max(q)));
    if lo > hi {
        return Err(Error::invalid("the teacher classifies no training sample correctly"));
    }
    let targets = (0..n)
        .map(|i| {
            let q = if correct[i] {
                let pos = min_max_position(scaled_target_probs[i], lo, hi);
                (q_min + (1.0 - q_min) * pos).min(1.0)
            } else {
                q_min
            };
            DistilledTarget::new(i, labels[i], class_count, q)
        })
        .collect();
    Ok(DistilledTargets {
        class_count,
        targets,
    })
}

/// Hint-extracting distillation of a trained teacher over `data`.
pub fn distill_targets(teacher: &Model, data: &LabeledDataset, cfg: &DistillConfig) -> Result<DistilledTargets> {
    cfg.validate()?;
    let (logits, probs) = check_and_score(teacher, data)?;
    let part = partition_from_probs(&probs, &data.labels);
    let mut correct = vec![false; data.len()];
    for &i in &part.correct {
        correct[i] = true;
    }
    let scaled = logits
        .iter_rows()
        .zip(&data.labels)
        .map(|(l, &t)| temperature_scale(l, cfg.tau).map(|q| q[t]))
        .collect::<Result<Vec<_>>>()?;
    distill_from_scores(&scaled, &correct, &data.labels, data.class_count, cfg.q_min)
}

/// Where the student's real-sample targets come from.
pub trait TargetSource {
    fn targets(&self, data: &LabeledDataset) -> Result<DistilledTargets>;
}

/// Distilled targets from a trained teacher.
pub struct HeKd<'a> {
    pub teacher: &'a Model,
    pub cfg: DistillConfig,
}

impl TargetSource for HeKd<'_> {
    fn targets(&self, data: &LabeledDataset) -> Result<DistilledTargets> {
        distill_targets(self.teacher, data, &self.cfg)
    }
}

/// Targets computed ahead of time.
pub struct FixedTargets(pub DistilledTargets);

impl TargetSource for FixedTargets {
    fn targets(&self, data: &LabeledDataset) -> Result<DistilledTargets> {
        if self.0.len() != data.len() || self.0.class_count != data.class_count {
            return Err(Error::dim("precomputed targets do not match the training data"));
        }
        Ok(self.0.clone())
    }
}

/// One-hot targets, no teacher.
pub struct HardTargets;

impl TargetSource for HardTargets {
    fn targets(&self, data: &LabeledDataset) -> Result<DistilledTargets> {
        Ok(DistilledTargets::hard(data))
    }
}
