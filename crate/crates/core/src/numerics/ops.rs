//! Forward-only conveniences over plain tensors. Each call records a
//! throwaway tape, so results match the differentiable path exactly.

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::Result;

pub const LAYERNORM_EPS: f64 = 1e-6;
pub const COSINE_EPS: f64 = 1e-8;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a), t.constant(b));
    let out = t.matmul(va, vb)?;
    Ok(t.tensor(out))
}

pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut t = Tape::new();
    let (vx, vg, vb) = (t.constant(x), t.constant(gain), t.constant(bias));
    let out = t.layernorm(vx, vg, vb, eps)?;
    Ok(t.tensor(out))
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut t = Tape::new();
    let vx = t.constant(x);
    let out = t.softmax(vx, axis)?;
    Ok(t.tensor(out))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor, eps: f64) -> Result<f64> {
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a), t.constant(b));
    let out = t.cosine_similarity(va, vb, eps)?;
    Ok(t.value(out)[0])
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut t = Tape::new();
    let v = t.constant(logits);
    let out = t.cross_entropy(v, labels)?;
    Ok(t.value(out)[0])
}
