//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    #[serde(skip)]
    pub m: Vec<f32>,
    #[serde(skip)]
    pub v: Vec<f32>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

impl OptimState {
    /// Fresh moments with the conventional betas `(0.9, 0.999)` and `eps = 1e-8`.
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
        }
    }

    pub fn for_model(state: &ModelState, weight_decay: f64) -> Self {
        Self::new(state.params.len(), weight_decay)
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// One AdamW update of `state.params`; both step counters advance.
///
/// Non-finite gradients reject the step and leave everything untouched.
pub fn apply_step(state: &mut ModelState, opt: &mut OptimState, grads: &[f32], lr: f64) -> Result<()> {
    if grads.len() != state.params.len() || opt.m.len() != grads.len() || opt.v.len() != grads.len() {
        return Err(Error::Training {
            step: opt.step,
            reason: format!(
                "gradient/moment shape mismatch: {} grads, {} params, {} moments",
                grads.len(),
                state.params.len(),
                opt.m.len()
            ),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training {
            step: opt.step,
            reason: format!("non-finite gradient at parameter index {i}"),
        });
    }
    let t = opt.step + 1;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let decay = (1.0 - lr * opt.weight_decay) as f32;
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    let (bc1, bc2, lr32, eps) = (bc1 as f32, bc2 as f32, lr as f32, opt.eps as f32);
    for (((p, &g), m), v) in state
        .params
        .iter_mut()
        .zip(grads)
        .zip(opt.m.iter_mut())
        .zip(opt.v.iter_mut())
    {
        *m = b1f * *m + (1.0 - b1f) * g;
        *v = b2f * *v + (1.0 - b2f) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p = *p * decay - lr32 * mhat / (vhat.sqrt() + eps);
    }
    opt.step = t;
    state.step += 1;
    Ok(())
}
