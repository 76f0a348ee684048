//! Adam with L2 weight decay folded into the gradient.

use std::collections::BTreeMap;

use crate::encoder::ModelState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One Adam update of every parameter in `grads`, followed by the
/// non-negativity projection of the source regressor.
pub fn adam_step(
    state: &mut ModelState,
    opt: &mut AdamState,
    grads: &[(String, Vec<f64>)],
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let n = state.param(name)?.numel();
        if n != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: vec![n],
                right: vec![g.len()],
            });
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let param = state.param_mut(name)?;
        let (m, v) = opt
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for (((p, gi), mi), vi) in param.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gd = gi + cfg.weight_decay * *p;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gd;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gd * gd;
            let mh = *mi / bc1;
            let vh = *vi / bc2;
            *p -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
        }
    }
    state.project_source_regressor();
    Ok(())
}
