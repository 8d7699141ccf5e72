use std::f64::consts::PI;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers for Adam, one pair per trainable tensor in a fixed order.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
    base_lr: f64,
}

impl AdamState {
    pub fn new(base_lr: f64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Usage(format!(
                "base learning rate must be > 0, got {base_lr}"
            )));
        }
        Ok(Self {
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
            base_lr,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn first_moment(&self, i: usize) -> Option<&[f64]> {
        self.first_moment.get(i).map(Vec::as_slice)
    }

    pub fn second_moment(&self, i: usize) -> Option<&[f64]> {
        self.second_moment.get(i).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update at learning rate `lr_t`, then zeroes grads.
///
/// `params` must be passed in the same order on every call.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, lr_t: f64) -> Result<()> {
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::Usage(format!(
            "optimizer tracks {} tensors, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            return Err(Error::Usage(format!(
                "parameter {i} has no gradient buffer"
            )));
        }
        if state.first_moment[i].len() != p.len() {
            return Err(Error::dim(format!(
                "moment buffer {i} does not match its parameter"
            )));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let (data, grad) = p.parts_mut();
        let grad = grad.expect("checked above");
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr_t * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        grad.fill(0.0);
    }
    Ok(())
}

/// Cosine-annealed learning rate: `base·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Usage("cosine schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Usage(format!(
            "step {step} beyond schedule of {total_steps}"
        )));
    }
    Ok(base_lr * (1.0 + (PI * step as f64 / total_steps as f64).cos()) / 2.0)
}
