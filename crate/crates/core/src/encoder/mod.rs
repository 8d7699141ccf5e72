//! Miniature pre-LN vision transformer.
//!
//! The forward pass exposes each prompted layer's attention keys to a hook,
//! which may answer with key/value offsets or prefix rows for that layer.

mod params;

use std::cell::Cell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::ops::LAYERNORM_EPS;
use crate::numerics::{Tape, Tensor, Var};

pub use params::{BoundEncoder, BoundLayer, EncoderParams, LayerParams};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: f64,
    /// Sorted, de-duplicated layer indices that consult the prompt hook.
    pub prompted_layers: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 6,
            mlp_ratio: 4.0,
            prompted_layers: (0..5).collect(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return bad("channels, embed_dim and num_heads must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            return bad(format!("invalid mlp_ratio {}", self.mlp_ratio));
        }
        if let Some(&l) = self.prompted_layers.iter().find(|&&l| l >= self.num_layers) {
            return bad(format!("prompted layer {l} outside 0..{}", self.num_layers));
        }
        if self.prompted_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("prompted layers must be strictly increasing".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn is_prompted(&self, layer: usize) -> bool {
        self.prompted_layers.binary_search(&layer).is_ok()
    }
}

/// What a prompt hook contributes to one layer's attention.
#[derive(Debug, Clone, Copy)]
pub enum LayerPrompt {
    /// Offsets added to the projected keys and values, `[batch·tokens × d]`.
    Additive { key: Var, value: Var },
    /// One offset added to the layer input ahead of the attention norm,
    /// `[batch·tokens × d]`.
    PreNorm { offset: Var },
    /// Extra key/value rows per item, `[batch·rows × d]` each.
    Prefix { key: Var, value: Var, rows: usize },
}

/// Callback consulted at every prompted layer with that layer's pre-prompt
/// attention keys `[batch·tokens × d]`.
pub type PromptHook<'a> = dyn FnMut(&mut Tape, usize, Var) -> Result<Option<LayerPrompt>> + 'a;

/// Activations recorded by one forward pass.
#[derive(Debug)]
pub struct EncoderTrace {
    pub batch: usize,
    pub tokens_per_item: usize,
    /// Layer inputs `h_l` for prompted layers.
    pub layer_inputs: BTreeMap<usize, Var>,
    /// Pre-prompt attention keys for prompted layers.
    pub keys: BTreeMap<usize, Var>,
    /// Final normalized tokens, `[batch·tokens × d]`.
    pub output: Var,
    pub bound: BoundEncoder,
}

impl EncoderTrace {
    /// Row indices of every item's class token in `output`.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.tokens_per_item).collect()
    }
}

#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    params: EncoderParams,
    passes: Cell<u64>,
}

impl Clone for Encoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            passes: Cell::new(self.passes.get()),
        }
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, seed);
        Ok(Self {
            config,
            params,
            passes: Cell::new(0),
        })
    }

    pub fn from_parts(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self {
            config,
            params,
            passes: Cell::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut EncoderParams {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.params.frozen
    }

    pub fn freeze(&mut self) {
        self.params.set_frozen(true);
    }

    pub fn unfreeze(&mut self) {
        self.params.set_frozen(false);
    }

    /// Number of encoder invocations so far.
    pub fn forward_passes(&self) -> u64 {
        self.passes.get()
    }

    pub fn reset_forward_passes(&self) {
        self.passes.set(0);
    }

    /// Runs the full encoder over `images` (`[batch × channels × H × W]`).
    ///
    /// `input_prompt` optionally appends `rows` prompt tokens per item after
    /// the image tokens. `hook` is called once per prompted layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        input_prompt: Option<(Var, usize)>,
        mut hook: Option<&mut PromptHook<'_>>,
    ) -> Result<EncoderTrace> {
        let cfg = &self.config;
        let bound = self.params.bind(tape);
        let h0 = tokenize_batch(tape, images, cfg, &bound)?;
        let batch = images.shape()[0];
        let mut tokens = cfg.num_tokens();
        let mut h = h0;
        if let Some((prompt, rows)) = input_prompt {
            h = insert_prompt_tuning(tape, h, prompt, batch, tokens, rows)?;
            tokens += rows;
        }
        let mut layer_inputs = BTreeMap::new();
        let mut keys = BTreeMap::new();
        for (l, lp) in bound.layers.iter().enumerate() {
            let prompted = cfg.is_prompted(l);
            if prompted {
                layer_inputs.insert(l, h);
            }
            let mut key_out = None;
            h = match (prompted, hook.as_deref_mut()) {
                (true, Some(f)) => {
                    let mut per_layer = |t: &mut Tape, hk: Var| {
                        key_out = Some(hk);
                        let p = f(t, l, hk)?;
                        if let Some(p) = &p {
                            check_prompt_shape(t, p, batch, tokens, cfg.embed_dim)?;
                        }
                        Ok(p)
                    };
                    transformer_layer(tape, h, lp, batch, cfg.num_heads, &mut per_layer)?
                }
                _ => {
                    let mut record = |_: &mut Tape, hk: Var| {
                        key_out = Some(hk);
                        Ok(None)
                    };
                    transformer_layer(tape, h, lp, batch, cfg.num_heads, &mut record)?
                }
            };
            if prompted {
                keys.insert(l, key_out.expect("mhsa reports its keys"));
            }
        }
        let output = tape.layernorm(h, bound.norm_gain, bound.norm_bias, LAYERNORM_EPS)?;
        self.passes.set(self.passes.get() + 1);
        Ok(EncoderTrace {
            batch,
            tokens_per_item: tokens,
            layer_inputs,
            keys,
            output,
            bound,
        })
    }

    /// Unprompted forward returning the class-token outputs `[batch × d]`.
    pub fn cls_features(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.forward(&mut tape, images, None, None)?;
        let cls = tape.select_rows(trace.output, &trace.cls_rows())?;
        Ok(tape.tensor(cls))
    }

    /// Pulls the gradients recorded on `tape` into the parameter buffers.
    /// Frozen parameters are skipped.
    pub fn accumulate_grads(&mut self, tape: &Tape, trace: &EncoderTrace) -> Result<()> {
        self.params.accumulate_grads(tape, &trace.bound)
    }
}

fn check_prompt_shape(
    tape: &Tape,
    p: &LayerPrompt,
    batch: usize,
    tokens: usize,
    d: usize,
) -> Result<()> {
    let rows = batch * tokens;
    let check = |v: Var, want: usize, what: &str| -> Result<()> {
        let s = tape.shape(v);
        if s != [want, d] {
            return Err(Error::dim(format!(
                "{what} has shape {s:?}, expected [{want}, {d}]"
            )));
        }
        Ok(())
    };
    match *p {
        LayerPrompt::Additive { key, value } => {
            check(key, rows, "key offset")?;
            check(value, rows, "value offset")
        }
        LayerPrompt::PreNorm { offset } => check(offset, rows, "input offset"),
        LayerPrompt::Prefix {
            key,
            value,
            rows: r,
        } => {
            check(key, batch * r, "key prefix")?;
            check(value, batch * r, "value prefix")
        }
    }
}

/// Flattens `[batch × C × H × W]` images into `[batch·p × C·P·P]` patch rows.
pub fn patch_rows(images: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let s = images.shape();
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::dim(format!(
            "images have shape {s:?}, expected [batch, {}, {}, {}]",
            want[0], want[1], want[2]
        )));
    }
    let (batch, ps, side) = (s[0], cfg.patch_size, cfg.image_size / cfg.patch_size);
    let (c, n) = (cfg.channels, cfg.image_size);
    let data = images.data();
    let mut out = Vec::with_capacity(batch * cfg.num_patches() * cfg.patch_dim());
    for b in 0..batch {
        let img = &data[b * c * n * n..(b + 1) * c * n * n];
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for dy in 0..ps {
                        let row = ch * n * n + (py * ps + dy) * n + px * ps;
                        out.extend_from_slice(&img[row..row + ps]);
                    }
                }
            }
        }
    }
    Tensor::new(&[batch * cfg.num_patches(), cfg.patch_dim()], out)
}

/// `h_0 = [CLS; IMG_1..IMG_p] + positions` for every image in the batch.
pub fn tokenize_batch(
    tape: &mut Tape,
    images: &Tensor,
    cfg: &EncoderConfig,
    p: &BoundEncoder,
) -> Result<Var> {
    let batch = images.shape().first().copied().unwrap_or(0);
    let patches = patch_rows(images, cfg)?;
    let pv = tape.constant(&patches);
    let proj = tape.matmul(pv, p.patch_w)?;
    let proj = tape.add_row(proj, p.patch_b)?;
    let cls = tape.reshape(p.cls, &[1, cfg.embed_dim])?;
    let cls = tape.broadcast_rows(cls, batch)?;
    let tokens = tape.concat_per_batch(&[(cls, 1), (proj, cfg.num_patches())], batch)?;
    tape.add_tiled(tokens, p.pos)
}

/// Tokenizes one `[channels × H × W]` image into `[(p+1) × d]`.
pub fn tokenize(image: &Tensor, params: &EncoderParams, cfg: &EncoderConfig) -> Result<Tensor> {
    let batched = image
        .clone()
        .reshape(&[1, cfg.channels, cfg.image_size, cfg.image_size])?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let h = tokenize_batch(&mut tape, &batched, cfg, &bound)?;
    Ok(tape.tensor(h))
}

/// Appends `rows` prompt tokens after each item's tokens.
///
/// `prompt` is either `[rows × d]` (shared) or `[batch·rows × d]`.
pub fn insert_prompt_tuning(
    tape: &mut Tape,
    h: Var,
    prompt: Var,
    batch: usize,
    tokens: usize,
    rows: usize,
) -> Result<Var> {
    let prompt = if tape.shape(prompt)[0] == rows && batch != 1 {
        tape.broadcast_rows(prompt, batch)?
    } else {
        prompt
    };
    tape.concat_per_batch(&[(h, tokens), (prompt, rows)], batch)
}

/// Multi-head self-attention over `LN(h)`.
///
/// Returns the attention output before the residual and the pre-prompt keys
/// `h_k = W_k·LN(h) + b_k`. `hook` sees `h_k` and decides the prompt.
pub fn mhsa(
    tape: &mut Tape,
    h: Var,
    lp: &BoundLayer,
    batch: usize,
    heads: usize,
    hook: &mut dyn FnMut(&mut Tape, Var) -> Result<Option<LayerPrompt>>,
) -> Result<(Var, Var)> {
    let normed = tape.layernorm(h, lp.ln1_gain, lp.ln1_bias, LAYERNORM_EPS)?;
    let hk = linear(tape, normed, lp.w_k, lp.b_k)?;
    let prompt = hook(tape, hk)?;
    let (q, k, v) = match prompt {
        None => {
            let q = linear(tape, normed, lp.w_q, lp.b_q)?;
            let v = linear(tape, normed, lp.w_v, lp.b_v)?;
            (q, hk, v)
        }
        Some(LayerPrompt::Additive { key, value }) => {
            let q = linear(tape, normed, lp.w_q, lp.b_q)?;
            let v = linear(tape, normed, lp.w_v, lp.b_v)?;
            let k = tape.add(hk, key)?;
            let v = tape.add(v, value)?;
            (q, k, v)
        }
        Some(LayerPrompt::PreNorm { offset }) => {
            let shifted = tape.add(h, offset)?;
            let normed = tape.layernorm(shifted, lp.ln1_gain, lp.ln1_bias, LAYERNORM_EPS)?;
            let q = linear(tape, normed, lp.w_q, lp.b_q)?;
            let k = linear(tape, normed, lp.w_k, lp.b_k)?;
            let v = linear(tape, normed, lp.w_v, lp.b_v)?;
            (q, k, v)
        }
        Some(LayerPrompt::Prefix { key, value, rows }) => {
            let q = linear(tape, normed, lp.w_q, lp.b_q)?;
            let v = linear(tape, normed, lp.w_v, lp.b_v)?;
            let tokens = tape.shape(h)[0] / batch;
            let k = tape.concat_per_batch(&[(hk, tokens), (key, rows)], batch)?;
            let v = tape.concat_per_batch(&[(v, tokens), (value, rows)], batch)?;
            (q, k, v)
        }
    };
    let attn = tape.attention(q, k, v, batch, heads)?;
    let out = linear(tape, attn, lp.w_o, lp.b_o)?;
    Ok((out, hk))
}

/// `z = MHSA(LN(h)) + h; h' = MLP(LN(z)) + z`
pub fn transformer_layer(
    tape: &mut Tape,
    h: Var,
    lp: &BoundLayer,
    batch: usize,
    heads: usize,
    hook: &mut dyn FnMut(&mut Tape, Var) -> Result<Option<LayerPrompt>>,
) -> Result<Var> {
    let (attn, _) = mhsa(tape, h, lp, batch, heads, hook)?;
    let z = tape.add(attn, h)?;
    let normed = tape.layernorm(z, lp.ln2_gain, lp.ln2_bias, LAYERNORM_EPS)?;
    let hidden = linear(tape, normed, lp.w_mlp1, lp.b_mlp1)?;
    let hidden = tape.gelu(hidden)?;
    let m = linear(tape, hidden, lp.w_mlp2, lp.b_mlp2)?;
    tape.add(m, z)
}

pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}
