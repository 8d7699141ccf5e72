use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::LayerPrompt;
use crate::error::{Error, Result};
use crate::numerics::ops::{cosine_similarity, COSINE_EPS};
use crate::numerics::{Tape, Tensor, Var};

use super::pool::PROMPT_INIT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorKind {
    /// Hard argmax of `cos(q, k_i)`; one prompt block per task.
    QueryKey,
    /// Soft mix `Σ cos(q ⊙ A_i, k_i)·P_i`.
    Attention,
}

/// Where a baseline puts its selected prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insertion {
    /// Extra key/value rows at every prompted layer.
    Prefix,
    /// Extra tokens appended at the input.
    PromptTuning,
}

/// Task-wise keys, attention vectors and prompt blocks for the classic
/// query-function selectors.
///
/// Each task owns a key `[d]`, an attention vector `[d]` (attention mode
/// only) and one block `[2·L_p × d]` per prompted layer: `L_p` key rows then
/// `L_p` value rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineMatcher {
    kind: SelectorKind,
    insertion: Insertion,
    dim: usize,
    prompt_length: usize,
    layers: Vec<usize>,
    pub keys: Vec<Tensor>,
    pub attention: Vec<Tensor>,
    /// `blocks[task][layer_slot]`.
    pub blocks: Vec<Vec<Tensor>>,
    current: Option<usize>,
}

/// Tape handles for the seen tasks of a [`BaselineMatcher`].
#[derive(Debug, Clone)]
pub struct BoundMatcher {
    /// `[seen × d]`
    pub keys: Var,
    /// `[seen × d]`, attention mode only.
    pub attention: Option<Var>,
    per_task_keys: Vec<Var>,
    per_task_attention: Vec<Var>,
    /// Per layer slot: `[seen·2·L_p × d]`.
    pub stacked: Vec<Var>,
    current: Vec<Var>,
}

impl BaselineMatcher {
    pub fn new(
        kind: SelectorKind,
        insertion: Insertion,
        dim: usize,
        prompt_length: usize,
        layers: &[usize],
        num_tasks: usize,
    ) -> Result<Self> {
        if dim == 0 || prompt_length == 0 || num_tasks == 0 {
            return Err(Error::Usage(
                "baseline matcher needs positive dim, prompt length and task count".into(),
            ));
        }
        let slots = match insertion {
            Insertion::Prefix => layers.len(),
            Insertion::PromptTuning => 1,
        };
        Ok(Self {
            kind,
            insertion,
            dim,
            prompt_length,
            layers: layers.to_vec(),
            keys: vec![Tensor::zeros(&[dim]); num_tasks],
            attention: match kind {
                SelectorKind::Attention => vec![Tensor::full(&[dim], 1.0); num_tasks],
                SelectorKind::QueryKey => Vec::new(),
            },
            blocks: vec![vec![Tensor::zeros(&[2 * prompt_length, dim]); slots]; num_tasks],
            current: None,
        })
    }

    pub fn kind(&self) -> SelectorKind {
        self.kind
    }

    pub fn insertion(&self) -> Insertion {
        self.insertion
    }

    pub fn prompt_length(&self) -> usize {
        self.prompt_length
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn num_tasks(&self) -> usize {
        self.keys.len()
    }

    pub fn current_task(&self) -> Option<usize> {
        self.current
    }

    pub fn tasks_seen(&self) -> usize {
        self.current.map_or(0, |t| t + 1)
    }

    /// Layer slot for prefix insertion at `layer`.
    pub fn slot(&self, layer: usize) -> Option<usize> {
        match self.insertion {
            Insertion::Prefix => self.layers.iter().position(|&l| l == layer),
            Insertion::PromptTuning => None,
        }
    }

    /// All learnable scalars across every planned task.
    pub fn learnable_count(&self) -> usize {
        let per_task = self.dim * (1 + self.attention.len().min(1))
            + self.blocks[0].len() * 2 * self.prompt_length * self.dim;
        per_task * self.keys.len()
    }

    /// Freezes earlier tasks and initializes task `t`.
    pub fn start_task(&mut self, t: usize, seed: u64) -> Result<()> {
        let expected = self.tasks_seen();
        if t != expected || t >= self.keys.len() {
            return Err(Error::Protocol(format!(
                "start_task({t}) out of order; expected task {expected} of {}",
                self.keys.len()
            )));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (t as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
        let mut key = Tensor::normal(&[self.dim], 1.0, &mut rng);
        let norm = key.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        key.data_mut()
            .iter_mut()
            .for_each(|v| *v /= norm.max(COSINE_EPS));
        self.keys[t] = key;
        for b in &mut self.blocks[t] {
            *b = Tensor::uniform(b.shape(), PROMPT_INIT, &mut rng);
        }
        self.current = Some(t);
        self.refresh_grad_flags();
        Ok(())
    }

    pub(crate) fn refresh_grad_flags(&mut self) {
        let cur = self.current;
        for t in 0..self.keys.len() {
            let live = Some(t) == cur;
            self.keys[t].set_requires_grad(live);
            if let Some(a) = self.attention.get_mut(t) {
                a.set_requires_grad(live);
            }
            for b in &mut self.blocks[t] {
                b.set_requires_grad(live);
            }
        }
    }

    /// Tensors trained for the current task.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let Some(t) = self.current else {
            return Vec::new();
        };
        let mut out = vec![&mut self.keys[t]];
        if let Some(a) = self.attention.get_mut(t) {
            out.push(a);
        }
        out.extend(self.blocks[t].iter_mut());
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundMatcher> {
        let seen = self.tasks_seen();
        if seen == 0 {
            return Err(Error::State("no task started".into()));
        }
        let d = self.dim;
        let per_task_keys: Vec<Var> = self.keys[..seen].iter().map(|k| tape.leaf(k)).collect();
        let rows: Vec<Var> = per_task_keys
            .iter()
            .map(|&k| tape.reshape(k, &[1, d]))
            .collect::<Result<_>>()?;
        let keys = cat_rows(tape, &rows)?;
        let per_task_attention: Vec<Var> = self
            .attention
            .iter()
            .take(seen)
            .map(|a| tape.leaf(a))
            .collect();
        let attention = if per_task_attention.is_empty() {
            None
        } else {
            let rows: Vec<Var> = per_task_attention
                .iter()
                .map(|&a| tape.reshape(a, &[1, d]))
                .collect::<Result<_>>()?;
            Some(cat_rows(tape, &rows)?)
        };
        let slots = self.blocks[0].len();
        let mut stacked = Vec::with_capacity(slots);
        let mut current = Vec::with_capacity(slots);
        for s in 0..slots {
            let vars: Vec<Var> = self.blocks[..seen]
                .iter()
                .map(|b| tape.leaf(&b[s]))
                .collect();
            current.push(*vars.last().expect("at least one task seen"));
            stacked.push(cat_rows(tape, &vars)?);
        }
        Ok(BoundMatcher {
            keys,
            attention,
            per_task_keys,
            per_task_attention,
            stacked,
            current,
        })
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundMatcher) -> Result<()> {
        let Some(t) = self.current else {
            return Ok(());
        };
        tape.accumulate_into(bound.per_task_keys[t], &mut self.keys[t])?;
        if let (Some(a), Some(v)) = (self.attention.get_mut(t), bound.per_task_attention.get(t)) {
            tape.accumulate_into(*v, a)?;
        }
        for (b, &v) in self.blocks[t].iter_mut().zip(&bound.current) {
            tape.accumulate_into(v, b)?;
        }
        Ok(())
    }

    /// Byte image of task `t`'s parameters.
    pub fn task_bytes(&self, t: usize) -> Vec<u8> {
        let mut out = self.keys[t].to_le_bytes();
        if let Some(a) = self.attention.get(t) {
            out.extend(a.to_le_bytes());
        }
        for b in &self.blocks[t] {
            out.extend(b.to_le_bytes());
        }
        out
    }
}

fn cat_rows(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(parts)
    }
}

fn check_query(q: &Tensor, dim: usize, tasks_seen: usize, available: usize) -> Result<()> {
    if tasks_seen == 0 {
        return Err(Error::Usage("no task seen yet".into()));
    }
    if tasks_seen > available {
        return Err(Error::Usage(format!(
            "{tasks_seen} tasks seen but only {available} exist"
        )));
    }
    if q.len() != dim {
        return Err(Error::dim(format!(
            "query has {} values, expected {dim}",
            q.len()
        )));
    }
    Ok(())
}

/// Index of the key most cosine-similar to `q` among the first `tasks_seen`
/// tasks; ties go to the lowest index.
pub fn querykey_select(q: &Tensor, matcher: &BaselineMatcher, tasks_seen: usize) -> Result<usize> {
    check_query(q, matcher.dim, tasks_seen, matcher.keys.len())?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, k) in matcher.keys[..tasks_seen].iter().enumerate() {
        let s = cosine_similarity(q, k, COSINE_EPS)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Per-row [`querykey_select`] over a `[batch × d]` query matrix.
pub fn querykey_select_batch(
    q: &Tensor,
    matcher: &BaselineMatcher,
    tasks_seen: usize,
) -> Result<Vec<usize>> {
    let (b, d) = q.rows_cols();
    if q.shape().len() != 2 || d != matcher.dim {
        return Err(Error::dim(format!(
            "queries {:?}, expected [batch, {}]",
            q.shape(),
            matcher.dim
        )));
    }
    (0..b)
        .map(|i| querykey_select(&Tensor::vector(q.row(i).to_vec()), matcher, tasks_seen))
        .collect()
}

/// `P_a = Σ_i cos(q ⊙ A_i, k_i)·P_i` for every layer slot.
pub fn attention_select(
    q: &Tensor,
    matcher: &BaselineMatcher,
    tasks_seen: usize,
) -> Result<Vec<Tensor>> {
    if matcher.kind != SelectorKind::Attention {
        return Err(Error::Usage(
            "attention_select needs an attention-mode matcher".into(),
        ));
    }
    check_query(q, matcher.dim, tasks_seen, matcher.keys.len())?;
    let mut tape = Tape::new();
    let mut m = matcher.clone();
    m.current = Some(tasks_seen - 1);
    let bound = m.bind(&mut tape)?;
    let qv = tape.constant(&q.clone().reshape(&[1, matcher.dim])?);
    let mixed = attention_prompts(&mut tape, qv, &bound, matcher.prompt_length)?;
    mixed
        .into_iter()
        .map(|v| {
            tape.tensor(v)
                .reshape(&[2 * matcher.prompt_length, matcher.dim])
        })
        .collect()
}

/// Soft-mixed prompt blocks on the tape, one `[batch·2·L_p × d]` per slot.
pub fn attention_prompts(
    tape: &mut Tape,
    q: Var,
    bound: &BoundMatcher,
    prompt_length: usize,
) -> Result<Vec<Var>> {
    let attention = bound
        .attention
        .ok_or_else(|| Error::Usage("matcher has no attention vectors".into()))?;
    let (batch, d) = (tape.shape(q)[0], tape.shape(q)[1]);
    let seen = bound.per_task_keys.len();
    let mut gammas = Vec::with_capacity(seen);
    for i in 0..seen {
        let a = tape.select_rows(attention, &[i])?;
        let a = tape.reshape(a, &[d])?;
        let qa = tape.mul_row(q, a)?;
        let k = tape.select_rows(bound.keys, &[i])?;
        gammas.push(tape.cosine_matrix(qa, k, COSINE_EPS)?);
    }
    let g = cat_cols(tape, &gammas)?;
    let mut out = Vec::with_capacity(bound.stacked.len());
    for &st in &bound.stacked {
        let flat = tape.reshape(st, &[seen, 2 * prompt_length * d])?;
        let mixed = tape.matmul(g, flat)?;
        out.push(tape.reshape(mixed, &[batch * 2 * prompt_length, d])?);
    }
    Ok(out)
}

fn cat_cols(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_cols(parts)
    }
}

/// Gathers the block of `tasks[b]` for every item from a stacked
/// `[seen·2·L_p × d]` tensor, as `[batch·2·L_p × d]`.
pub fn gather_blocks(
    tape: &mut Tape,
    stacked: Var,
    tasks: &[usize],
    prompt_length: usize,
) -> Result<Var> {
    let r = 2 * prompt_length;
    let index: Vec<usize> = tasks.iter().flat_map(|&t| (t * r)..(t * r + r)).collect();
    tape.select_rows(stacked, &index)
}

/// Splits per-item blocks `[batch·2·L_p × d]` into a prefix prompt.
pub fn prefix_prompt(
    tape: &mut Tape,
    blocks: Var,
    batch: usize,
    prompt_length: usize,
) -> Result<LayerPrompt> {
    let r = 2 * prompt_length;
    let key_rows: Vec<usize> = (0..batch)
        .flat_map(|b| (b * r)..(b * r + prompt_length))
        .collect();
    let value_rows: Vec<usize> = (0..batch)
        .flat_map(|b| (b * r + prompt_length)..(b * r + r))
        .collect();
    Ok(LayerPrompt::Prefix {
        key: tape.select_rows(blocks, &key_rows)?,
        value: tape.select_rows(blocks, &value_rows)?,
        rows: prompt_length,
    })
}

/// First `L_p` rows of each item's block, `[batch·L_p × d]`, for input
/// prompt-tuning.
pub fn input_prompt_rows(
    tape: &mut Tape,
    blocks: Var,
    batch: usize,
    prompt_length: usize,
) -> Result<Var> {
    let r = 2 * prompt_length;
    let rows: Vec<usize> = (0..batch)
        .flat_map(|b| (b * r)..(b * r + prompt_length))
        .collect();
    tape.select_rows(blocks, &rows)
}

/// `mean_b (1 − cos(q_b, k_t))`, pulling the task key toward its queries.
pub fn key_pull_loss(tape: &mut Tape, q: Var, bound: &BoundMatcher, task: usize) -> Result<Var> {
    let k = tape.select_rows(bound.keys, &[task])?;
    let c = tape.cosine_matrix(q, k, COSINE_EPS)?;
    let neg = tape.scale(c, -1.0)?;
    let one_minus = tape.offset(neg, 1.0)?;
    tape.mean(one_minus)
}
