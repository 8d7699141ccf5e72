//! Linear classifier over importance-pooled tokens, with logit masking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::COSINE_EPS;
use crate::numerics::{Tape, Tensor, Var};

/// Which prompted layer's keys drive the token importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImportanceSource {
    #[default]
    LastPrompted,
    FirstPrompted,
}

/// Classifier `φ` (`[C × d]` weight, `[C]` bias) and the importance weight
/// `W_s` with one scalar per pool entry.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub importance: Tensor,
    pub source: ImportanceSource,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
    pub importance: Var,
}

impl HeadParams {
    /// Weight uniform in `±1/√d`, zero bias, zero `W_s`.
    pub fn new(num_classes: usize, dim: usize, pool_size: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::Usage(
                "head needs at least one class and a positive width".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = Self {
            weight: Tensor::uniform(&[num_classes, dim], 1.0 / (dim as f64).sqrt(), &mut rng),
            bias: Tensor::zeros(&[num_classes]),
            importance: Tensor::zeros(&[pool_size]),
            source: ImportanceSource::default(),
        };
        for t in head.tensors_mut() {
            t.set_requires_grad(true);
        }
        Ok(head)
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.weight, &self.bias, &self.importance]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.weight, &mut self.bias, &mut self.importance]
    }

    /// `C·d + C + S`
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
            importance: tape.leaf(&self.importance),
        }
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundHead) -> Result<()> {
        tape.accumulate_into(bound.weight, &mut self.weight)?;
        tape.accumulate_into(bound.bias, &mut self.bias)?;
        tape.accumulate_into(bound.importance, &mut self.importance)
    }
}

/// Classes admitted to the softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogitMask {
    allowed: Vec<bool>,
}

impl LogitMask {
    pub fn from_classes(num_classes: usize, classes: &[usize]) -> Result<Self> {
        let mut allowed = vec![false; num_classes];
        for &c in classes {
            *allowed.get_mut(c).ok_or_else(|| {
                Error::InvalidMask(format!("class {c} outside 0..{num_classes}"))
            })? = true;
        }
        Ok(Self { allowed })
    }

    pub fn all(num_classes: usize) -> Self {
        Self {
            allowed: vec![true; num_classes],
        }
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn contains(&self, class: usize) -> bool {
        self.allowed.get(class).copied().unwrap_or(false)
    }
}

/// Softmax over image tokens of `Σ_j W_s[j]·sim[t][j]`, where `sim` holds
/// every token's cosine weights `[batch·tokens × n]` and `w_s` is `[n × 1]`.
/// Returns `[batch × (tokens − 1)]`; class-token rows are skipped.
pub fn importance_on_tape(
    tape: &mut Tape,
    sim: Var,
    w_s: Var,
    batch: usize,
    tokens: usize,
) -> Result<Var> {
    let p = tokens
        .checked_sub(1)
        .filter(|&p| p > 0)
        .ok_or_else(|| Error::dim("no image tokens"))?;
    let rows: Vec<usize> = (0..batch)
        .flat_map(|b| (b * tokens + 1)..((b + 1) * tokens))
        .collect();
    let img = tape.select_rows(sim, &rows)?;
    let scores = tape.matmul(img, w_s)?;
    let scores = tape.reshape(scores, &[batch, p])?;
    tape.softmax(scores, 1)
}

/// The first `n` entries of `W_s` as an `[n × 1]` column.
pub fn active_importance(tape: &mut Tape, importance: Var, n: usize) -> Result<Var> {
    let s = tape.shape(importance)[0];
    let col = tape.reshape(importance, &[s, 1])?;
    if n == s {
        return Ok(col);
    }
    tape.select_rows(col, &(0..n).collect::<Vec<_>>())
}

/// Uniform `1/p` token weights, used when no prompt is active.
pub fn uniform_importance(tape: &mut Tape, batch: usize, tokens: usize) -> Result<Var> {
    let p = tokens
        .checked_sub(1)
        .filter(|&p| p > 0)
        .ok_or_else(|| Error::dim("no image tokens"))?;
    Ok(tape.constant(&Tensor::full(&[batch, p], 1.0 / p as f64)))
}

/// `S(x)` for one image: `h_k` is `[(p+1) × d]`, `keys` `[n × d]`, `w_s` `[n]`.
pub fn importance_weights(h_k: &Tensor, keys: &Tensor, w_s: &Tensor) -> Result<Tensor> {
    let n = keys.shape()[0];
    if w_s.len() != n {
        return Err(Error::dim(format!(
            "{} importance weights for {n} keys",
            w_s.len()
        )));
    }
    let mut tape = Tape::new();
    let tokens = h_k.shape()[0];
    if n == 0 {
        let u = uniform_importance(&mut tape, 1, tokens)?;
        return tape.tensor(u).reshape(&[tokens - 1]);
    }
    let (hk, k) = (tape.constant(h_k), tape.constant(keys));
    let sim = tape.cosine_matrix(hk, k, COSINE_EPS)?;
    let ws = tape.constant_from(&[n, 1], w_s.data().to_vec())?;
    let s = importance_on_tape(&mut tape, sim, ws, 1, tokens)?;
    tape.tensor(s).reshape(&[tokens - 1])
}

/// `ĥ = out[CLS] + Σ_i S(x)_i·out[IMG_i]` for each item, `[batch × d]`.
pub fn aggregate_on_tape(tape: &mut Tape, output: Var, s_x: Var, tokens: usize) -> Result<Var> {
    let batch = tape.shape(s_x)[0];
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
    let cls = tape.select_rows(output, &cls_rows)?;
    let pooled = tape.token_pool(output, s_x, tokens, 1)?;
    tape.add(cls, pooled)
}

/// [`aggregate_on_tape`] for one image's final tokens `[(p+1) × d]`.
pub fn aggregate_logit_input(tokens: &Tensor, s_x: &Tensor) -> Result<Tensor> {
    let (rows, d) = tokens.rows_cols();
    if s_x.len() + 1 != rows {
        return Err(Error::dim(format!(
            "{} importance weights for {rows} tokens",
            s_x.len()
        )));
    }
    let mut tape = Tape::new();
    let out = tape.constant(tokens);
    let s = tape.constant_from(&[1, s_x.len()], s_x.data().to_vec())?;
    let h = aggregate_on_tape(&mut tape, out, s, rows)?;
    tape.tensor(h).reshape(&[d])
}

/// `ĥ·φᵀ + b`, `[batch × C]`.
pub fn logits_on_tape(tape: &mut Tape, h_hat: Var, head: &BoundHead) -> Result<Var> {
    let z = tape.matmul_bt(h_hat, head.weight)?;
    tape.add_row(z, head.bias)
}

/// Cross-entropy over logits with disallowed classes set to `-∞`. Their
/// classifier rows receive exactly zero gradient.
pub fn masked_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    mask: &LogitMask,
    labels: &[usize],
) -> Result<Var> {
    if let Some(&y) = labels.iter().find(|&&y| !mask.contains(y)) {
        return Err(Error::InvalidMask(format!("label {y} is masked out")));
    }
    let masked = tape.mask_fill(logits, mask.allowed())?;
    tape.cross_entropy(masked, labels)
}

/// Forward-only masked loss for `ĥ` `[batch × d]`.
pub fn masked_loss(
    h_hat: &Tensor,
    head: &HeadParams,
    mask: &LogitMask,
    labels: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let h = tape.constant(h_hat);
    let b = head.bind(&mut tape);
    let z = logits_on_tape(&mut tape, h, &b)?;
    let l = masked_loss_on_tape(&mut tape, z, mask, labels)?;
    Ok(tape.value(l)[0])
}
