//! Analytic gradients against central finite differences. Every check
//! returns the worst relative error it saw.

use rand::Rng;
use tes_osr::explorer::{discriminator_gradients, discriminator_loss, generator_gradients, generator_loss, ExplorerPair};
use tes_osr::nn::{
    binary_cross_entropy_grad, categorical_cross_entropy_grad, Model, NetworkSpec, OutputActivation, ParamMap, Tensor,
};
use tes_osr::student::{student_gradients, StudentModel};
use tes_osr::{rng_from_seed, Rng as SeededRng};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, FLOOR)`; the floor keeps gradients that are
/// zero up to rounding from dividing by noise.
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Perturbs every entry of every parameter of `model` in place and
/// compares `loss` differences against `grads`.
fn check_params(model: &mut Model, grads: &ParamMap, loss: &mut dyn FnMut(&Model) -> f64) -> f64 {
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let len = model.params()[&name].len();
        for i in 0..len {
            let orig = model.params()[&name].data()[i];
            model.params_mut()[&name].data_mut()[i] = orig + H;
            let up = loss(model);
            model.params_mut()[&name].data_mut()[i] = orig - H;
            let down = loss(model);
            model.params_mut()[&name].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(grads[&name].data()[i], numeric));
        }
    }
    worst
}

fn weighted_sum(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn bce_oracle(p: &Tensor, q: &Tensor) -> f64 {
    let s: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&p, &q)| -(q * p.ln() + (1.0 - q) * (1.0 - p).ln()))
        .sum();
    s / p.rows() as f64
}

fn cce_oracle(p: &Tensor, t: &Tensor) -> f64 {
    let s: f64 = p.data().iter().zip(t.data()).map(|(&p, &t)| -t * p.ln()).sum();
    s / p.rows() as f64
}

#[derive(Clone, Copy, Debug)]
enum Loss {
    Weighted,
    Bce,
    Cce,
}

fn random_network(rng: &mut SeededRng) -> (NetworkSpec, Loss) {
    let in_dim = rng.random_range(1..=5);
    let depth = rng.random_range(0..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=8)).collect();
    let (act, loss) = match rng.random_range(0..4) {
        0 => (OutputActivation::Linear, Loss::Weighted),
        1 => (OutputActivation::LeakyRelu, Loss::Weighted),
        2 => (OutputActivation::Sigmoid, Loss::Bce),
        _ => (OutputActivation::Softmax, Loss::Cce),
    };
    let out_dim = match loss {
        Loss::Cce => rng.random_range(2..=5),
        _ => rng.random_range(1..=4),
    };
    let leak = rng.random_range(0.0..0.3);
    (NetworkSpec::mlp(in_dim, &hidden, out_dim, leak, act).unwrap(), loss)
}

/// Parameter and input gradients of one random network and loss.
pub fn random_architecture(seed: u64) -> f64 {
    let mut rng = rng_from_seed(1000 + seed);
    let (spec, loss_kind) = random_network(&mut rng);
    let mut model = Model::new(spec.clone(), &mut rng).unwrap();
    let n = rng.random_range(1..=6);
    let x = random_matrix(&mut rng, n, spec.in_dim(), -2.0, 2.0);
    let k = spec.out_dim();
    let target = match loss_kind {
        Loss::Weighted => random_matrix(&mut rng, n, k, -1.0, 1.0),
        Loss::Bce => random_matrix(&mut rng, n, k, 0.0, 1.0),
        Loss::Cce => {
            let mut t = Tensor::zeros(vec![n, k]);
            for r in 0..n {
                let c = rng.random_range(0..k);
                t.row_mut(r)[c] = 1.0;
            }
            t
        }
    };

    let trace = model.forward(&x).unwrap();
    let out = trace.output();
    let dout = match loss_kind {
        Loss::Weighted => target.clone(),
        Loss::Bce => binary_cross_entropy_grad(out, &target).unwrap(),
        Loss::Cce => categorical_cross_entropy_grad(out, &target).unwrap(),
    };
    let grads = model.backward(&trace, &dout).unwrap();
    let value = |m: &Model, x: &Tensor| {
        let out = m.predict(x).unwrap();
        match loss_kind {
            Loss::Weighted => weighted_sum(&out, &target),
            Loss::Bce => bce_oracle(&out, &target),
            Loss::Cce => cce_oracle(&out, &target),
        }
    };

    let mut worst = check_params(&mut model, &grads.params, &mut |m| value(m, &x));
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += H;
        let mut down = x.clone();
        down.data_mut()[i] -= H;
        let numeric = (value(&model, &up) - value(&model, &down)) / (2.0 * H);
        worst = worst.max(rel_err(grads.input.data()[i], numeric));
    }
    worst
}

fn student_value(s: &StudentModel, x: &Tensor, q: &Tensor) -> f64 {
    bce_oracle(&s.predict(x).unwrap().probs, q)
}

/// Trunk and head gradients of the student objective on real rows.
pub fn student(seed: u64) -> f64 {
    let mut rng = rng_from_seed(2000 + seed);
    let classes = rng.random_range(1..=4);
    let trunk: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect();
    let head: Vec<usize> = (0..rng.random_range(0..=1)).map(|_| rng.random_range(2..=5)).collect();
    let s = StudentModel::new(3, &trunk, &head, classes, 0.05, &mut rng).unwrap();
    let n = 5;
    let x = random_matrix(&mut rng, n, 3, 0.0, 1.0);
    let q = random_matrix(&mut rng, n, classes + 1, 0.0, 1.0);
    let (_, grads) = student_gradients(&s, &x, &q, None, 0.7).unwrap();

    let mut trunk_model = s.trunk.clone();
    let mut worst = check_params(&mut trunk_model, &grads.trunk, &mut |m| {
        let probe = StudentModel::from_parts(m.clone(), s.heads.clone()).unwrap();
        student_value(&probe, &x, &q)
    });
    for k in 0..s.heads.len() {
        let mut h = s.heads[k].clone();
        worst = worst.max(check_params(&mut h, &grads.heads[k], &mut |m| {
            let mut hs = s.heads.clone();
            hs[k] = m.clone();
            let probe = StudentModel::from_parts(s.trunk.clone(), hs).unwrap();
            student_value(&probe, &x, &q)
        }));
    }
    worst
}

/// Generator (adversarial plus weighted student term) and discriminator
/// gradients.
pub fn explorer(seed: u64, lambda: f64) -> f64 {
    let mut rng = rng_from_seed(3000 + seed);
    let pair = ExplorerPair::new(2, 3, &[6], &[5], 0.1, lambda, &mut rng).unwrap();
    let student = StudentModel::new(2, &[5], &[3], 2, 0.1, &mut rng).unwrap();
    let z = random_matrix(&mut rng, 4, 3, -1.5, 1.5);
    let real = random_matrix(&mut rng, 4, 2, 0.0, 1.0);

    let (_, g_grads) = generator_gradients(&pair, &student, &z).unwrap();
    let mut g = pair.generator.clone();
    let worst_g = check_params(&mut g, &g_grads, &mut |m| {
        let p = ExplorerPair::from_parts(m.clone(), pair.discriminator.clone(), lambda).unwrap();
        generator_loss(&p, &student, &z).unwrap().total(lambda)
    });

    let (_, d_grads) = discriminator_gradients(&pair, &real, &z).unwrap();
    let mut d = pair.discriminator.clone();
    let worst_d = check_params(&mut d, &d_grads, &mut |m| {
        let p = ExplorerPair::from_parts(pair.generator.clone(), m.clone(), lambda).unwrap();
        discriminator_loss(&p, &real, &z).unwrap()
    });
    worst_g.max(worst_d)
}

pub const EXPLORER_LAMBDAS: [f64; 4] = [0.0, 0.5, 1.0, 3.0];
