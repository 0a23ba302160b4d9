//! Generator/discriminator pair that searches open space.
//!
//! The discriminator is trained as in a standard GAN. The generator
//! minimizes `log(1 - D(G(z)))` plus `lambda` times the student's binary
//! cross-entropy against the hard unknown label, so it is pulled toward
//! samples that look real yet are scored unknown by the current student.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, bce_sum, clamp_prob, AdamConfig, Checkpoint, Model, NetworkSpec, OutputActivation, ParamMap, Tensor,
};
use crate::student::{unknown_targets, StudentModel};

/// Standard normal prior over latent vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentPrior {
    pub dim: usize,
}

/// `n x dim` i.i.d. standard normal draws.
pub fn sample_latent<R: Rng + ?Sized>(prior: &LatentPrior, n: usize, rng: &mut R) -> Tensor {
    let data = (0..n * prior.dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(n, prior.dim, data).expect("latent shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorerPair {
    pub generator: Model,
    pub discriminator: Model,
    pub prior: LatentPrior,
    /// Weight of the student term in the generator objective.
    pub lambda: f64,
    /// Use `-log D(G(z))` instead of `log(1 - D(G(z)))` for the adversarial
    /// term.
    pub non_saturating: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneratorLoss {
    pub adv_loss: f64,
    /// Zero when `lambda == 0`; the student is not evaluated then.
    pub student_loss: f64,
}

impl GeneratorLoss {
    pub fn total(&self, lambda: f64) -> f64 {
        self.adv_loss + lambda * self.student_loss
    }
}

impl ExplorerPair {
    /// Generator `latent -> gen_hidden... -> data_dim` (sigmoid) and
    /// discriminator `data_dim -> disc_hidden... -> 1` (sigmoid).
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        latent_dim: usize,
        gen_hidden: &[usize],
        disc_hidden: &[usize],
        leak: f64,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        let generator = Model::new(
            NetworkSpec::mlp(latent_dim, gen_hidden, data_dim, leak, OutputActivation::Sigmoid)?,
            rng,
        )?;
        let discriminator = Model::new(
            NetworkSpec::mlp(data_dim, disc_hidden, 1, leak, OutputActivation::Sigmoid)?,
            rng,
        )?;
        Self::from_parts(generator, discriminator, lambda)
    }

    pub fn from_parts(generator: Model, discriminator: Model, lambda: f64) -> Result<Self> {
        if generator.out_dim() != discriminator.in_dim() || discriminator.out_dim() != 1 {
            return Err(Error::dim("generator output must feed a single-output discriminator"));
        }
        if !(lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda {lambda} must be non-negative")));
        }
        let prior = LatentPrior { dim: generator.in_dim() };
        Ok(ExplorerPair {
            generator,
            discriminator,
            prior,
            lambda,
            non_saturating: false,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.generator.out_dim()
    }

    pub fn generate(&self, latent: &Tensor) -> Result<Tensor> {
        self.generator.predict(latent)
    }

    pub fn to_checkpoint(&self, adam: AdamConfig) -> Checkpoint {
        Checkpoint {
            adam,
            models: vec![
                ("generator".into(), self.generator.clone()),
                ("discriminator".into(), self.discriminator.clone()),
            ],
        }
    }

    pub fn from_checkpoint(mut ck: Checkpoint, lambda: f64) -> Result<Self> {
        let g = ck.take("generator")?;
        let d = ck.take("discriminator")?;
        Self::from_parts(g, d, lambda)
    }
}

fn check_batches(pair: &ExplorerPair, real: &Tensor, latent: &Tensor) -> Result<()> {
    if real.rows() == 0 || real.rows() != latent.rows() {
        return Err(Error::dim(format!(
            "real batch of {} rows and latent batch of {} rows must match and be non-empty",
            real.rows(),
            latent.rows()
        )));
    }
    if real.cols() != pair.data_dim() || latent.cols() != pair.prior.dim {
        return Err(Error::dim("batch widths do not fit the explorer"));
    }
    Ok(())
}

fn mean_ln(values: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    values.iter().map(|&d| f(clamp_prob(d)).ln()).sum::<f64>() / values.len() as f64
}

/// `E[log D(x)] + E[log(1 - D(G(z)))]`, the quantity the discriminator
/// maximizes.
pub fn discriminator_objective(pair: &ExplorerPair, real: &Tensor, latent: &Tensor) -> Result<f64> {
    check_batches(pair, real, latent)?;
    let fakes = pair.generate(latent)?;
    let d_real = pair.discriminator.predict(real)?;
    let d_fake = pair.discriminator.predict(&fakes)?;
    Ok(mean_ln(d_real.data(), |d| d) + mean_ln(d_fake.data(), |d| 1.0 - d))
}

/// Loss minimized by [`discriminator_step`]: the negated objective.
pub fn discriminator_loss(pair: &ExplorerPair, real: &Tensor, latent: &Tensor) -> Result<f64> {
    Ok(-discriminator_objective(pair, real, latent)?)
}

/// Loss and parameter gradients of the discriminator on one batch.
pub fn discriminator_gradients(pair: &ExplorerPair, real: &Tensor, latent: &Tensor) -> Result<(f64, ParamMap)> {
    check_batches(pair, real, latent)?;
    let n = real.rows();
    let fakes = pair.generate(latent)?;
    let both = Tensor::vstack(&[real, &fakes])?;
    let trace = pair.discriminator.forward(&both)?;
    let d = trace.output().data();
    let (d_real, d_fake) = d.split_at(n);
    let loss = -(mean_ln(d_real, |v| v) + mean_ln(d_fake, |v| 1.0 - v));
    let nf = n as f64;
    let grad: Vec<f64> = d_real
        .iter()
        .map(|&v| -1.0 / (clamp_prob(v) * nf))
        .chain(d_fake.iter().map(|&v| 1.0 / ((1.0 - clamp_prob(v)) * nf)))
        .collect();
    let g = pair.discriminator.backward(&trace, &Tensor::matrix(2 * n, 1, grad)?)?;
    Ok((loss, g.params))
}

/// One Adam step on the discriminator. Returns the loss before the update.
pub fn discriminator_step(pair: &mut ExplorerPair, real: &Tensor, latent: &Tensor, adam: &AdamConfig) -> Result<f64> {
    let (loss, grads) = discriminator_gradients(pair, real, latent)?;
    adam_step(&mut pair.discriminator, &grads, adam)?;
    Ok(loss)
}

fn check_generator_inputs(pair: &ExplorerPair, student: &StudentModel, latent: &Tensor) -> Result<()> {
    if !(pair.lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda {} must be non-negative", pair.lambda)));
    }
    if latent.rows() == 0 || latent.cols() != pair.prior.dim {
        return Err(Error::dim("latent batch must be non-empty and match the prior"));
    }
    if student.in_dim() != pair.data_dim() {
        return Err(Error::dim("student input width differs from generated sample width"));
    }
    Ok(())
}

fn adversarial_term(pair: &ExplorerPair, d_fake: &[f64]) -> f64 {
    if pair.non_saturating {
        -mean_ln(d_fake, |d| d)
    } else {
        mean_ln(d_fake, |d| 1.0 - d)
    }
}

/// The generator objective at the current parameters.
pub fn generator_loss(pair: &ExplorerPair, student: &StudentModel, latent: &Tensor) -> Result<GeneratorLoss> {
    check_generator_inputs(pair, student, latent)?;
    let fakes = pair.generate(latent)?;
    let d_fake = pair.discriminator.predict(&fakes)?;
    let student_loss = if pair.lambda > 0.0 {
        let p = student.predict(&fakes)?.probs;
        bce_sum(p.data(), unknown_targets(fakes.rows(), student.class_count()).data()) / fakes.rows() as f64
    } else {
        0.0
    };
    Ok(GeneratorLoss {
        adv_loss: adversarial_term(pair, d_fake.data()),
        student_loss,
    })
}

/// Loss parts and generator parameter gradients of
/// `adv + lambda * student_loss` on one latent batch.
pub fn generator_gradients(pair: &ExplorerPair, student: &StudentModel, latent: &Tensor) -> Result<(GeneratorLoss, ParamMap)> {
    check_generator_inputs(pair, student, latent)?;
    let n = latent.rows();
    let nf = n as f64;
    let g_trace = pair.generator.forward(latent)?;
    let fakes = g_trace.output();

    let d_trace = pair.discriminator.forward(fakes)?;
    let d = d_trace.output().data();
    let adv_loss = adversarial_term(pair, d);
    let d_grad: Vec<f64> = d
        .iter()
        .map(|&v| {
            let v = clamp_prob(v);
            if pair.non_saturating {
                -1.0 / (v * nf)
            } else {
                -1.0 / ((1.0 - v) * nf)
            }
        })
        .collect();
    let mut dx = pair
        .discriminator
        .backward(&d_trace, &Tensor::matrix(n, 1, d_grad)?)?
        .input;

    let mut student_loss = 0.0;
    if pair.lambda > 0.0 {
        let s_trace = student.forward(fakes)?;
        let probs = &s_trace.output.probs;
        let y_u = unknown_targets(n, student.class_count());
        student_loss = bce_sum(probs.data(), y_u.data()) / nf;
        let dlogits = Tensor::new(
            probs.shape().to_vec(),
            probs
                .data()
                .iter()
                .zip(y_u.data())
                .map(|(p, q)| pair.lambda * (p - q) / nf)
                .collect(),
        )?;
        let s_grads = student.backward(&s_trace, &dlogits)?;
        for (a, b) in dx.data_mut().iter_mut().zip(s_grads.input.data()) {
            *a += b;
        }
    }

    let g = pair.generator.backward(&g_trace, &dx)?;
    Ok((GeneratorLoss { adv_loss, student_loss }, g.params))
}

/// One Adam step on the generator; discriminator and student stay fixed.
/// Returns the loss parts before the update.
pub fn generator_step(
    pair: &mut ExplorerPair,
    student: &StudentModel,
    latent: &Tensor,
    adam: &AdamConfig,
) -> Result<GeneratorLoss> {
    let (loss, grads) = generator_gradients(pair, student, latent)?;
    adam_step(&mut pair.generator, &grads, adam)?;
    Ok(loss)
}
