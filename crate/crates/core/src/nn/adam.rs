use serde::{Deserialize, Serialize};

use super::model::{Model, ParamMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam configuration {self:?}")))
        }
    }
}

/// One bias-corrected Adam update of every parameter in `model`.
pub fn adam_step(model: &mut Model, grads: &ParamMap, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    for (name, p) in model.params() {
        match grads.get(name) {
            Some(g) if g.shape() == p.shape() => {
                g.ensure_finite(name)?;
            }
            Some(g) => {
                return Err(Error::dim(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            None => return Err(Error::invalid(format!("missing gradient for {name}"))),
        }
    }

    let t = model.opt_state.t + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let state = &mut model.opt_state;
    for (name, p) in model.params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("moment per parameter").data_mut();
        let v = state.v.get_mut(name).expect("moment per parameter").data_mut();
        for (((w, mi), vi), &gi) in p.data_mut().iter_mut().zip(m).zip(v).zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    model.opt_state.t = t;
    Ok(())
}
