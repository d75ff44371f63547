use serde::{Deserialize, Serialize};

use super::params::ParamBlock;
use crate::error::{Error, Result};

/// Per-block Adam moments with the usual defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn for_block(block: &ParamBlock, lr: f64) -> Self {
        Self::new(block.len(), lr)
    }
}

/// Bias-corrected Adam update of `block.values` from `block.grads`.
pub fn adam_step(block: &mut ParamBlock, state: &mut AdamState) -> Result<()> {
    if block.grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { block: block.name.clone() });
    }
    if state.m.len() != block.len() {
        return Err(Error::LengthMismatch {
            context: "adam state",
            expected: block.len(),
            actual: state.m.len(),
        });
    }
    state.t += 1;
    let b1t = 1.0 - state.beta1.powi(state.t as i32);
    let b2t = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..block.values.len() {
        let g = block.grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        block.values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
