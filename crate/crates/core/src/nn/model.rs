//! Parameter store, forward pass and reverse-mode gradients for
//! feed-forward networks.
//!
//! Dense weights are stored `[in_dim, out_dim]` so that `y = x W + b` walks
//! rows of `W` contiguously in both directions.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{LayerSpec, NetworkSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type ParamMap = IndexMap<String, Tensor>;

/// Adam moments and step counter for every parameter of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamMap,
    pub v: ParamMap,
}

impl AdamState {
    fn zeros_like(params: &ParamMap) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape().to_vec())))
                .collect()
        };
        AdamState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    spec: NetworkSpec,
    pub(crate) params: ParamMap,
    pub(crate) opt_state: AdamState,
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("dense{layer}.weight")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("dense{layer}.bias")
}

impl Model {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamMap::new();
        for (i, layer) in spec.layers().iter().enumerate() {
            if let LayerSpec::Dense { in_dim, out_dim } = *layer {
                let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
                let w: Vec<f64> = (0..in_dim * out_dim)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                params.insert(weight_name(i), Tensor::matrix(in_dim, out_dim, w)?);
                params.insert(bias_name(i), Tensor::zeros(vec![out_dim]));
            }
        }
        let opt_state = AdamState::zeros_like(&params);
        Ok(Model {
            spec,
            params,
            opt_state,
        })
    }

    /// Assembles a model from explicit parameters, with fresh optimizer state.
    pub fn from_params(spec: NetworkSpec, params: ParamMap) -> Result<Self> {
        let opt_state = AdamState::zeros_like(&params);
        Self::from_parts(spec, params, opt_state)
    }

    pub(crate) fn from_parts(
        spec: NetworkSpec,
        params: ParamMap,
        opt_state: AdamState,
    ) -> Result<Self> {
        spec.validate()?;
        let mut expected = 0;
        for (i, layer) in spec.layers().iter().enumerate() {
            if let LayerSpec::Dense { in_dim, out_dim } = *layer {
                expected += 2;
                let check = |name: String, shape: &[usize]| -> Result<()> {
                    match params.get(&name) {
                        Some(p) if p.shape() == shape => Ok(()),
                        Some(p) => Err(Error::dim(format!(
                            "parameter {name} has shape {:?}, expected {:?}",
                            p.shape(),
                            shape
                        ))),
                        None => Err(Error::invalid(format!("missing parameter {name}"))),
                    }
                };
                check(weight_name(i), &[in_dim, out_dim])?;
                check(bias_name(i), &[out_dim])?;
            }
        }
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "model has {} parameters, spec needs {expected}",
                params.len()
            )));
        }
        for (name, p) in &params {
            for moments in [&opt_state.m, &opt_state.v] {
                match moments.get(name) {
                    Some(m) if m.shape() == p.shape() => {}
                    _ => {
                        return Err(Error::invalid(format!(
                            "optimizer moments for {name} missing or misshapen"
                        )))
                    }
                }
            }
        }
        Ok(Model {
            spec,
            params,
            opt_state,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub fn opt_state(&self) -> &AdamState {
        &self.opt_state
    }

    pub fn step_count(&self) -> u64 {
        self.opt_state.t
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Runs the network and keeps every intermediate activation.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardTrace> {
        self.check_input(batch)?;
        let mut activations = Vec::with_capacity(self.spec.layers().len() + 1);
        activations.push(batch.clone());
        for (i, layer) in self.spec.layers().iter().enumerate() {
            let next = self.apply_layer(i, layer, activations.last().unwrap());
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    /// Like [`Model::forward`] but only returns the output.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut cur = batch.clone();
        for (i, layer) in self.spec.layers().iter().enumerate() {
            cur = self.apply_layer(i, layer, &cur);
        }
        Ok(cur)
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.in_dim() {
            return Err(Error::dim(format!(
                "batch of shape {:?} does not fit input width {}",
                batch.shape(),
                self.in_dim()
            )));
        }
        batch.ensure_finite("input batch")
    }

    fn apply_layer(&self, i: usize, layer: &LayerSpec, x: &Tensor) -> Tensor {
        let n = x.rows();
        match *layer {
            LayerSpec::Dense { in_dim, out_dim } => {
                let w = self.params[&weight_name(i)].data();
                let b = self.params[&bias_name(i)].data();
                let mut out = Vec::with_capacity(n * out_dim);
                for row in x.iter_rows() {
                    let start = out.len();
                    out.extend_from_slice(b);
                    let y = &mut out[start..];
                    for (k, &xk) in row.iter().enumerate().take(in_dim) {
                        if xk == 0.0 {
                            continue;
                        }
                        let wk = &w[k * out_dim..(k + 1) * out_dim];
                        for (yj, &wj) in y.iter_mut().zip(wk) {
                            *yj += xk * wj;
                        }
                    }
                }
                Tensor::matrix(n, out_dim, out).expect("dense output shape")
            }
            LayerSpec::LeakyRelu { leak } => x.map(|v| if v > 0.0 { v } else { leak * v }),
            LayerSpec::Sigmoid => x.map(sigmoid),
            LayerSpec::Softmax => {
                let mut out = x.clone();
                out.clear_grad();
                for r in 0..n {
                    softmax_in_place(out.row_mut(r));
                }
                out
            }
        }
    }

    /// Reverse-mode pass: gradients of every parameter and of the input,
    /// given the gradient of the loss with respect to the output.
    pub fn backward(&self, trace: &ForwardTrace, loss_grad: &Tensor) -> Result<Gradients> {
        let layers = self.spec.layers();
        if trace.activations.len() != layers.len() + 1 {
            return Err(Error::invalid(format!(
                "trace has {} activations, model has {} layers",
                trace.activations.len(),
                layers.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if let LayerSpec::Dense { in_dim, out_dim } = *layer {
                if trace.activations[i].cols() != in_dim || trace.activations[i + 1].cols() != out_dim
                {
                    return Err(Error::invalid(format!(
                        "trace does not belong to this model (layer {i})"
                    )));
                }
            }
        }
        let output = trace.output();
        if loss_grad.shape() != output.shape() {
            return Err(Error::dim(format!(
                "loss gradient shape {:?} does not match output shape {:?}",
                loss_grad.shape(),
                output.shape()
            )));
        }

        let mut params = ParamMap::with_capacity(self.params.len());
        let mut grad = loss_grad.clone();
        grad.clear_grad();
        for i in (0..layers.len()).rev() {
            let input = &trace.activations[i];
            let out = &trace.activations[i + 1];
            match layers[i] {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let w = self.params[&weight_name(i)].data();
                    let mut dw = vec![0.0; in_dim * out_dim];
                    let mut db = vec![0.0; out_dim];
                    let mut dx = vec![0.0; input.rows() * in_dim];
                    for r in 0..input.rows() {
                        let x = input.row(r);
                        let g = grad.row(r);
                        for (dbj, &gj) in db.iter_mut().zip(g) {
                            *dbj += gj;
                        }
                        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
                        for k in 0..in_dim {
                            let wk = &w[k * out_dim..(k + 1) * out_dim];
                            let dwk = &mut dw[k * out_dim..(k + 1) * out_dim];
                            let xk = x[k];
                            let mut acc = 0.0;
                            for j in 0..out_dim {
                                dwk[j] += xk * g[j];
                                acc += wk[j] * g[j];
                            }
                            dxr[k] = acc;
                        }
                    }
                    params.insert(weight_name(i), Tensor::matrix(in_dim, out_dim, dw)?);
                    params.insert(bias_name(i), Tensor::new(vec![out_dim], db)?);
                    grad = Tensor::matrix(input.rows(), in_dim, dx)?;
                }
                LayerSpec::LeakyRelu { leak } => {
                    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
                        if x <= 0.0 {
                            *g *= leak;
                        }
                    }
                }
                LayerSpec::Sigmoid => {
                    for (g, &y) in grad.data_mut().iter_mut().zip(out.data()) {
                        *g *= y * (1.0 - y);
                    }
                }
                LayerSpec::Softmax => {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let g = grad.row_mut(r);
                        let dot: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                        for (gj, &yj) in g.iter_mut().zip(y) {
                            *gj = yj * (*gj - dot);
                        }
                    }
                }
            }
        }
        // Present in parameter order.
        let params = self
            .params
            .keys()
            .map(|k| (k.clone(), params.swap_remove(k).expect("gradient for every parameter")))
            .collect();
        Ok(Gradients { params, input: grad })
    }
}

/// Activations recorded by [`Model::forward`]: the input followed by the
/// output of every layer.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("trace holds the input at least")
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    /// Output of the last dense layer, i.e. the pre-activation logits when
    /// the network ends in sigmoid or softmax.
    pub fn last_dense_output(&self, spec: &NetworkSpec) -> &Tensor {
        let idx = spec
            .layers()
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
            .expect("validated spec has a dense layer");
        &self.activations[idx + 1]
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamMap,
    /// Gradient with respect to the network input.
    pub input: Tensor,
}

impl Gradients {
    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.params {
            let mine = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("no gradient slot for {name}")))?;
            if mine.shape() != g.shape() {
                return Err(Error::dim(format!("gradient {name} shapes differ")));
            }
            for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
