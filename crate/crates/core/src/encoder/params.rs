use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Weights of one transformer layer. Linear weights are stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_mlp1: Tensor,
    pub b_mlp1: Tensor,
    pub w_mlp2: Tensor,
    pub b_mlp2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub frozen: bool,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_mlp1: Var,
    pub b_mlp1: Var,
    pub w_mlp2: Var,
    pub b_mlp2: Var,
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub layers: Vec<BoundLayer>,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

impl LayerParams {
    fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            w_q: xavier(d, d, rng),
            b_q: Tensor::zeros(&[d]),
            w_k: xavier(d, d, rng),
            b_k: Tensor::zeros(&[d]),
            w_v: xavier(d, d, rng),
            b_v: Tensor::zeros(&[d]),
            w_o: xavier(d, d, rng),
            b_o: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w_mlp1: xavier(d, hidden, rng),
            b_mlp1: Tensor::zeros(&[hidden]),
            w_mlp2: xavier(hidden, d, rng),
            b_mlp2: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_mlp1,
            &self.b_mlp1,
            &self.w_mlp2,
            &self.b_mlp2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_mlp1,
            &mut self.b_mlp1,
            &mut self.w_mlp2,
            &mut self.b_mlp2,
        ]
    }

    fn bind(&self, tape: &mut Tape) -> BoundLayer {
        let [ln1_gain, ln1_bias, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_gain, ln2_bias, w_mlp1, b_mlp1, w_mlp2, b_mlp2] =
            self.tensors().map(|t| tape.leaf(t));
        BoundLayer {
            ln1_gain,
            ln1_bias,
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            ln2_gain,
            ln2_bias,
            w_mlp1,
            b_mlp1,
            w_mlp2,
            b_mlp2,
        }
    }
}

impl BoundLayer {
    fn vars(&self) -> [Var; 16] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.w_q,
            self.b_q,
            self.w_k,
            self.b_k,
            self.w_v,
            self.b_v,
            self.w_o,
            self.b_o,
            self.ln2_gain,
            self.ln2_bias,
            self.w_mlp1,
            self.b_mlp1,
            self.w_mlp2,
            self.b_mlp2,
        ]
    }
}

impl EncoderParams {
    /// Xavier-uniform linear weights, N(0, 0.02) class token and positions,
    /// unit norms. Starts unfrozen.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let patch_w = xavier(cfg.patch_dim(), d, &mut rng);
        let cls = Tensor::normal(&[d], 0.02, &mut rng);
        let pos = Tensor::normal(&[cfg.num_tokens(), d], 0.02, &mut rng);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams::init(d, cfg.mlp_hidden(), &mut rng))
            .collect();
        let mut p = Self {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            cls,
            pos,
            layers,
            norm_gain: Tensor::full(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            frozen: true,
        };
        p.set_frozen(false);
        p
    }

    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.cls, &self.pos];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.norm_gain);
        v.push(&self.norm_bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls,
            &mut self.pos,
        ];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.norm_gain);
        v.push(&mut self.norm_bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Frozen parameters carry no gradient buffers.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for t in self.tensors_mut() {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        BoundEncoder {
            patch_w: tape.leaf(&self.patch_w),
            patch_b: tape.leaf(&self.patch_b),
            cls: tape.leaf(&self.cls),
            pos: tape.leaf(&self.pos),
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            norm_gain: tape.leaf(&self.norm_gain),
            norm_bias: tape.leaf(&self.norm_bias),
        }
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundEncoder) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        let vars = bound_vars(bound);
        for (t, v) in self.tensors_mut().into_iter().zip(vars) {
            tape.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub(crate) fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let reference = EncoderParams::init(cfg, 0);
        if self.layers.len() != reference.layers.len() {
            return Err(Error::dim(format!(
                "{} layers for a {}-layer config",
                self.layers.len(),
                reference.layers.len()
            )));
        }
        for (i, (a, b)) in self.tensors().iter().zip(reference.tensors()).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::dim(format!(
                    "encoder tensor {i} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Byte image of every tensor, for bit-exact snapshot comparison.
    pub fn fingerprint(&self) -> Vec<u8> {
        self.tensors()
            .iter()
            .flat_map(|t| t.to_le_bytes())
            .collect()
    }
}

fn bound_vars(b: &BoundEncoder) -> Vec<Var> {
    let mut v = vec![b.patch_w, b.patch_b, b.cls, b.pos];
    for l in &b.layers {
        v.extend(l.vars());
    }
    v.push(b.norm_gain);
    v.push(b.norm_bias);
    v
}
