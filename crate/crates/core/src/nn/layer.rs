use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEAK: f64 = 0.01;

/// One entry of a feed-forward network description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    LeakyRelu {
        #[serde(default = "default_leak")]
        leak: f64,
    },
    Sigmoid,
    Softmax,
}

fn default_leak() -> f64 {
    DEFAULT_LEAK
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Dense { in_dim, out_dim }
    }

    pub fn leaky_relu() -> Self {
        LayerSpec::LeakyRelu { leak: DEFAULT_LEAK }
    }
}

/// An ordered layer list with consistent widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
}

/// Final activation appended by [`NetworkSpec::mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    /// No activation; the network emits raw logits.
    Linear,
    Sigmoid,
    Softmax,
    LeakyRelu,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = NetworkSpec { layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Dense layers `in -> hidden... -> out` with leaky ReLU between them.
    pub fn mlp(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        leak: f64,
        output: OutputActivation,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for &h in hidden {
            layers.push(LayerSpec::dense(prev, h));
            layers.push(LayerSpec::LeakyRelu { leak });
            prev = h;
        }
        layers.push(LayerSpec::dense(prev, out_dim));
        match output {
            OutputActivation::Linear => {}
            OutputActivation::Sigmoid => layers.push(LayerSpec::Sigmoid),
            OutputActivation::Softmax => layers.push(LayerSpec::Softmax),
            OutputActivation::LeakyRelu => layers.push(LayerSpec::LeakyRelu { leak }),
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn validate(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        let mut saw_dense = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if in_dim == 0 || out_dim == 0 {
                        return Err(Error::invalid(format!("layer {i}: zero-width dense layer")));
                    }
                    if let Some(w) = width {
                        if w != in_dim {
                            return Err(Error::dim(format!(
                                "layer {i}: expects width {in_dim}, previous layer emits {w}"
                            )));
                        }
                    }
                    width = Some(out_dim);
                    saw_dense = true;
                }
                LayerSpec::LeakyRelu { leak } => {
                    if !(leak > 0.0 && leak < 1.0) {
                        return Err(Error::invalid(format!(
                            "layer {i}: leak {leak} outside (0, 1)"
                        )));
                    }
                }
                LayerSpec::Sigmoid | LayerSpec::Softmax => {}
            }
        }
        if !saw_dense {
            return Err(Error::invalid("network needs at least one dense layer"));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Dense { in_dim, .. } => Some(*in_dim),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Dense { out_dim, .. } => Some(*out_dim),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn last(&self) -> Option<&LayerSpec> {
        self.layers.last()
    }
}
