//! One-vs-rest student: a shared trunk followed by one sigmoid head per
//! known class plus one for the unknown class `U` (last).
//!
//! The student learns distilled soft targets on real samples and the hard
//! unknown label on generated samples whose known-class scores are all
//! below `1 - q_min` ("active unknowns"). Heads emit logits; the sigmoid is
//! applied here so both logits and probabilities are available.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::distill::{validate_q_min, DistilledTargets, TargetSource, EVAL_CHUNK};
use crate::error::{Error, Result};
use crate::explorer::{discriminator_step, generator_step, sample_latent, ExplorerPair};
use crate::nn::{
    adam_step, bce_sum, epoch_batches, sigmoid, AdamConfig, Checkpoint, ForwardTrace, Model,
    NetworkSpec, OutputActivation, ParamMap, Tensor,
};
use crate::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub trunk: Model,
    /// Known classes in order, then `U`.
    pub heads: Vec<Model>,
}

/// Logits and sigmoid outputs of every head, `N x (|Y|+1)`.
#[derive(Debug, Clone)]
pub struct StudentOutput {
    pub logits: Tensor,
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct StudentTrace {
    trunk: ForwardTrace,
    heads: Vec<ForwardTrace>,
    pub output: StudentOutput,
}

#[derive(Debug, Clone)]
pub struct StudentGrads {
    pub trunk: ParamMap,
    pub heads: Vec<ParamMap>,
    pub input: Tensor,
}

impl StudentModel {
    /// Trunk `in_dim -> trunk_hidden...` (leaky ReLU after every layer) and
    /// `class_count + 1` heads `h -> head_hidden... -> 1`.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        trunk_hidden: &[usize],
        head_hidden: &[usize],
        class_count: usize,
        leak: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (&feat, inner) = trunk_hidden
            .split_last()
            .ok_or_else(|| Error::invalid("student trunk needs at least one layer"))?;
        if class_count == 0 {
            return Err(Error::invalid("student needs at least one known class"));
        }
        let trunk = Model::new(
            NetworkSpec::mlp(in_dim, inner, feat, leak, OutputActivation::LeakyRelu)?,
            rng,
        )?;
        let heads = (0..=class_count)
            .map(|_| Model::new(NetworkSpec::mlp(feat, head_hidden, 1, leak, OutputActivation::Linear)?, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(trunk, heads)
    }

    pub fn from_parts(trunk: Model, heads: Vec<Model>) -> Result<Self> {
        if heads.len() < 2 {
            return Err(Error::invalid("student needs |Y| + 1 >= 2 heads"));
        }
        for (k, h) in heads.iter().enumerate() {
            if h.in_dim() != trunk.out_dim() || h.out_dim() != 1 {
                return Err(Error::dim(format!(
                    "head {k} maps {} -> {}, trunk emits {}",
                    h.in_dim(),
                    h.out_dim(),
                    trunk.out_dim()
                )));
            }
        }
        Ok(StudentModel { trunk, heads })
    }

    /// Number of known classes.
    pub fn class_count(&self) -> usize {
        self.heads.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<StudentTrace> {
        let trunk = self.trunk.forward(x)?;
        let n = x.rows();
        let width = self.heads.len();
        let mut logits = vec![0.0; n * width];
        let mut heads = Vec::with_capacity(width);
        for (k, head) in self.heads.iter().enumerate() {
            let tr = head.forward(trunk.output())?;
            for (r, &l) in tr.output().data().iter().enumerate() {
                logits[r * width + k] = l;
            }
            heads.push(tr);
        }
        let logits = Tensor::matrix(n, width, logits)?;
        let probs = logits.map(sigmoid);
        Ok(StudentTrace {
            trunk,
            heads,
            output: StudentOutput { logits, probs },
        })
    }

    /// Forward pass over any number of rows, in chunks, without keeping
    /// activations.
    pub fn predict(&self, x: &Tensor) -> Result<StudentOutput> {
        let width = self.heads.len();
        let (mut logits, mut probs) = (Vec::new(), Vec::new());
        let all: Vec<usize> = (0..x.rows()).collect();
        if all.is_empty() {
            self.trunk.predict(x)?;
        }
        for chunk in all.chunks(EVAL_CHUNK) {
            let feat = self.trunk.predict(&x.select_rows(chunk))?;
            let mut l = vec![0.0; chunk.len() * width];
            for (k, head) in self.heads.iter().enumerate() {
                for (r, &v) in head.predict(&feat)?.data().iter().enumerate() {
                    l[r * width + k] = v;
                }
            }
            probs.extend(l.iter().map(|&v| sigmoid(v)));
            logits.extend(l);
        }
        Ok(StudentOutput {
            logits: Tensor::matrix(x.rows(), width, logits)?,
            probs: Tensor::matrix(x.rows(), width, probs)?,
        })
    }

    /// Gradients given `d loss / d logits`.
    pub fn backward(&self, trace: &StudentTrace, dlogits: &Tensor) -> Result<StudentGrads> {
        let width = self.heads.len();
        if dlogits.shape() != trace.output.logits.shape() || trace.heads.len() != width {
            return Err(Error::dim("logit gradient does not match the student trace"));
        }
        let n = dlogits.rows();
        let mut dfeat: Option<Tensor> = None;
        let mut heads = Vec::with_capacity(width);
        for (k, (head, tr)) in self.heads.iter().zip(&trace.heads).enumerate() {
            let col: Vec<f64> = (0..n).map(|r| dlogits.row(r)[k]).collect();
            let g = head.backward(tr, &Tensor::matrix(n, 1, col)?)?;
            match dfeat.as_mut() {
                None => dfeat = Some(g.input),
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.input.data()) {
                        *a += b;
                    }
                }
            }
            heads.push(g.params);
        }
        let trunk = self.trunk.backward(&trace.trunk, &dfeat.expect("at least two heads"))?;
        Ok(StudentGrads {
            trunk: trunk.params,
            heads,
            input: trunk.input,
        })
    }

    pub fn apply(&mut self, grads: &StudentGrads, adam: &AdamConfig) -> Result<()> {
        adam_step(&mut self.trunk, &grads.trunk, adam)?;
        for (head, g) in self.heads.iter_mut().zip(&grads.heads) {
            adam_step(head, g, adam)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, adam: AdamConfig) -> Checkpoint {
        let mut models = vec![("trunk".to_string(), self.trunk.clone())];
        for (k, h) in self.heads.iter().enumerate() {
            models.push((format!("head{k}"), h.clone()));
        }
        Checkpoint { adam, models }
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let trunk = ck.take("trunk")?;
        let mut heads = Vec::new();
        while let Ok(h) = ck.take(&format!("head{}", heads.len())) {
            heads.push(h);
        }
        Self::from_parts(trunk, heads)
    }
}

/// Active-unknown gate: a row is active when every known-class probability is
/// strictly below `1 - q_min`. The unknown head (last column) is ignored.
pub fn active_mask(probs: &Tensor, q_min: f64) -> Vec<bool> {
    let known = probs.cols() - 1;
    // `p + q_min < 1` keeps the boundary exact for decimal inputs such as
    // p = 0.3, q_min = 0.7, where `1 - q_min` rounds above 0.3.
    probs
        .iter_rows()
        .map(|row| row[..known].iter().all(|&p| p + q_min < 1.0))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ActiveUnknownBatch {
    pub samples: Tensor,
    pub mask: Vec<bool>,
}

impl ActiveUnknownBatch {
    pub fn count(&self) -> usize {
        self.samples.rows()
    }
}

pub fn select_active_unknowns(student: &StudentModel, fakes: &Tensor, q_min: f64) -> Result<ActiveUnknownBatch> {
    validate_q_min(q_min)?;
    let out = student.predict(fakes)?;
    let mask = active_mask(&out.probs, q_min);
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    Ok(ActiveUnknownBatch {
        samples: fakes.select_rows(&idx),
        mask,
    })
}

/// Hard unknown label `[0, ..., 0, 1]` for `n` rows.
pub fn unknown_targets(n: usize, class_count: usize) -> Tensor {
    let width = class_count + 1;
    let mut t = Tensor::zeros(vec![n, width]);
    for r in 0..n {
        t.row_mut(r)[class_count] = 1.0;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StudentLoss {
    /// BCE against distilled targets, summed over heads, mean over the batch.
    pub real_loss: f64,
    /// BCE of active unknowns against `U`, divided by the batch size.
    pub fake_loss: f64,
    pub active_count: usize,
}

impl StudentLoss {
    pub fn total(&self) -> f64 {
        self.real_loss + self.fake_loss
    }
}

struct PreparedStep {
    inputs: Tensor,
    targets: Tensor,
    n: usize,
    active: usize,
}

fn prepare(
    student: &StudentModel,
    real_batch: &Tensor,
    real_targets: &Tensor,
    fakes: Option<&Tensor>,
    q_min: f64,
) -> Result<PreparedStep> {
    validate_q_min(q_min)?;
    let n = real_batch.rows();
    let width = student.heads.len();
    if real_targets.shape() != [n, width] {
        return Err(Error::dim(format!(
            "targets of shape {:?} for {n} rows and {width} heads",
            real_targets.shape()
        )));
    }
    let (inputs, targets, active) = match fakes {
        Some(f) => {
            if f.rows() != n {
                return Err(Error::dim(format!("{} fakes for a real batch of {n}", f.rows())));
            }
            let sel = select_active_unknowns(student, f, q_min)?;
            let k = sel.count();
            let inputs = Tensor::vstack(&[real_batch, &sel.samples])?;
            let targets = Tensor::vstack(&[real_targets, &unknown_targets(k, width - 1)])?;
            (inputs, targets, k)
        }
        None => (real_batch.clone(), real_targets.clone(), 0),
    };
    Ok(PreparedStep {
        inputs,
        targets,
        n,
        active,
    })
}

fn split_loss(probs: &Tensor, targets: &Tensor, n: usize, active: usize) -> StudentLoss {
    let width = probs.cols();
    let nf = n.max(1) as f64;
    let (pr, pf) = probs.data().split_at(n * width);
    let (tr, tf) = targets.data().split_at(n * width);
    StudentLoss {
        real_loss: bce_sum(pr, tr) / nf,
        fake_loss: bce_sum(pf, tf) / nf,
        active_count: active,
    }
}

/// The combined student objective at the current parameters.
pub fn student_loss(
    student: &StudentModel,
    real_batch: &Tensor,
    real_targets: &Tensor,
    fakes: Option<&Tensor>,
    q_min: f64,
) -> Result<StudentLoss> {
    let prep = prepare(student, real_batch, real_targets, fakes, q_min)?;
    let out = student.predict(&prep.inputs)?;
    Ok(split_loss(&out.probs, &prep.targets, prep.n, prep.active))
}

/// Loss parts and gradients of the student objective: BCE of every head
/// against `real_targets` on the real rows plus BCE against the unknown
/// label on the active fakes, both divided by the real batch size.
pub fn student_gradients(
    student: &StudentModel,
    real_batch: &Tensor,
    real_targets: &Tensor,
    fakes: Option<&Tensor>,
    q_min: f64,
) -> Result<(StudentLoss, StudentGrads)> {
    let prep = prepare(student, real_batch, real_targets, fakes, q_min)?;
    let trace = student.forward(&prep.inputs)?;
    let loss = split_loss(&trace.output.probs, &prep.targets, prep.n, prep.active);
    let nf = prep.n.max(1) as f64;
    let dlogits = Tensor::new(
        trace.output.probs.shape().to_vec(),
        trace
            .output
            .probs
            .data()
            .iter()
            .zip(prep.targets.data())
            .map(|(p, q)| (p - q) / nf)
            .collect(),
    )?;
    let grads = student.backward(&trace, &dlogits)?;
    Ok((loss, grads))
}

/// One Adam step on the student. `batch_indices` address `distilled`;
/// `fakes`, when given, must have as many rows as the real batch. Returns
/// the loss parts measured before the update.
pub fn student_step(
    student: &mut StudentModel,
    real_batch: &Tensor,
    batch_indices: &[usize],
    distilled: &DistilledTargets,
    fakes: Option<&Tensor>,
    q_min: f64,
    adam: &AdamConfig,
) -> Result<StudentLoss> {
    if batch_indices.len() != real_batch.rows() {
        return Err(Error::dim("one target index per real row is required"));
    }
    let real_targets = distilled.matrix(batch_indices)?;
    let (loss, grads) = student_gradients(student, real_batch, &real_targets, fakes, q_min)?;
    student.apply(&grads, adam)?;
    Ok(loss)
}

const GAN_ADAM: AdamConfig = AdamConfig {
    lr: 0.002,
    beta1: 0.5,
    beta2: 0.999,
    eps: 1e-8,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub q_min: f64,
    /// Train the explorer and feed its samples to the student.
    pub use_explorer: bool,
    pub adam_student: AdamConfig,
    pub adam_generator: AdamConfig,
    pub adam_discriminator: AdamConfig,
    /// Generated samples scored after every epoch from a fixed latent set.
    pub probe_count: usize,
    /// Keep the probe samples of every epoch in the record.
    pub keep_probe_samples: bool,
    /// Snapshot models every this many epochs (0 disables).
    pub snapshot_every: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            epochs: 100,
            batch_size: 256,
            q_min: 0.7,
            use_explorer: true,
            adam_student: AdamConfig::default(),
            adam_generator: GAN_ADAM,
            adam_discriminator: GAN_ADAM,
            probe_count: 1000,
            keep_probe_samples: true,
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_adv_loss: f64,
    pub g_student_loss: f64,
    pub s_real_loss: f64,
    pub s_fake_loss: f64,
    /// Active unknowns used for student updates during the epoch.
    pub active_count: usize,
    /// Active unknowns among the probe samples generated after the epoch.
    pub probe_active: usize,
}

#[derive(Debug, Clone)]
pub struct ProbeSamples {
    pub epoch: usize,
    pub samples: Tensor,
    pub active: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub epoch: usize,
    pub student: Checkpoint,
    pub explorer: Option<Checkpoint>,
}

#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub epochs: Vec<EpochMetrics>,
    pub probes: Vec<ProbeSamples>,
    pub snapshots: Vec<Snapshot>,
}

impl RunRecord {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `metrics.csv` contents.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,d_loss,g_adv_loss,g_student_loss,s_real_loss,s_fake_loss,active_count\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.epoch, e.d_loss, e.g_adv_loss, e.g_student_loss, e.s_real_loss, e.s_fake_loss, e.active_count
            );
        }
        s
    }
}

/// Alternating training of explorer and student over `data`.
///
/// Targets are requested from `targets` exactly once, before the first
/// epoch. Each iteration updates the discriminator, then the generator,
/// generates as many fakes as real rows, and updates the student. Without
/// an explorer (`explorer` is `None` or `cfg.use_explorer` is false) only
/// the student is trained.
pub fn joint_train(
    targets: &dyn TargetSource,
    student: &mut StudentModel,
    mut explorer: Option<&mut ExplorerPair>,
    data: &LabeledDataset,
    cfg: &JointConfig,
    seed: u64,
) -> Result<RunRecord> {
    let mut record = RunRecord::default();
    if cfg.epochs == 0 {
        return Ok(record);
    }
    data.validate_for_training()?;
    validate_q_min(cfg.q_min)?;
    if student.class_count() != data.class_count || student.in_dim() != data.dim() {
        return Err(Error::dim("student does not fit the training data"));
    }
    if !cfg.use_explorer {
        explorer = None;
    }
    if let Some(pair) = explorer.as_deref() {
        if pair.data_dim() != data.dim() {
            return Err(Error::dim("explorer does not fit the training data"));
        }
    }

    let distilled = targets.targets(data)?;
    if distilled.len() != data.len() {
        return Err(Error::invalid("target source returned the wrong number of targets"));
    }

    let mut batch_rng = rng_from_seed(derive_seed(seed, 1));
    let mut latent_rng = rng_from_seed(derive_seed(seed, 2));
    let probe_latent = match explorer.as_deref() {
        Some(pair) if cfg.probe_count > 0 => {
            let mut r = rng_from_seed(derive_seed(seed, 3));
            Some(sample_latent(&pair.prior, cfg.probe_count, &mut r))
        }
        _ => None,
    };

    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut batch_rng);
        let mut m = EpochMetrics {
            epoch,
            ..EpochMetrics::default()
        };
        for idx in &batches {
            let real = data.features.select_rows(idx);
            let fakes = match explorer.as_deref_mut() {
                Some(pair) => {
                    let z = sample_latent(&pair.prior, idx.len(), &mut latent_rng);
                    m.d_loss += discriminator_step(pair, &real, &z, &cfg.adam_discriminator)?;
                    let g = generator_step(pair, student, &z, &cfg.adam_generator)?;
                    m.g_adv_loss += g.adv_loss;
                    m.g_student_loss += g.student_loss;
                    Some(pair.generate(&z)?)
                }
                None => None,
            };
            let s = student_step(student, &real, idx, &distilled, fakes.as_ref(), cfg.q_min, &cfg.adam_student)?;
            m.s_real_loss += s.real_loss;
            m.s_fake_loss += s.fake_loss;
            m.active_count += s.active_count;
        }
        let nb = batches.len().max(1) as f64;
        m.d_loss /= nb;
        m.g_adv_loss /= nb;
        m.g_student_loss /= nb;
        m.s_real_loss /= nb;
        m.s_fake_loss /= nb;

        if let (Some(pair), Some(z)) = (explorer.as_deref(), probe_latent.as_ref()) {
            let samples = pair.generate(z)?;
            let active = active_mask(&student.predict(&samples)?.probs, cfg.q_min);
            m.probe_active = active.iter().filter(|&&a| a).count();
            if cfg.keep_probe_samples {
                record.probes.push(ProbeSamples { epoch, samples, active });
            }
        }
        if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 {
            record.snapshots.push(Snapshot {
                epoch,
                student: student.to_checkpoint(cfg.adam_student),
                explorer: explorer.as_deref().map(|p| p.to_checkpoint(cfg.adam_generator)),
            });
        }
        record.epochs.push(m);
    }
    Ok(record)
}
