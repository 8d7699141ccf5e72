use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::encoder::{Encoder, EncoderTrace, LayerPrompt};
use crate::error::{Error, Result};
use crate::head::{
    active_importance, aggregate_on_tape, importance_on_tape, logits_on_tape, masked_loss_on_tape,
    uniform_importance, BoundHead, HeadParams, ImportanceSource, LogitMask,
};
use crate::numerics::{Tape, Tensor, Var};
use crate::prompts::{
    attention_prompts, gather_blocks, input_prompt_rows, key_pull_loss, prefix_prompt,
    querykey_select_batch, semantic_prompt, BaselineMatcher, BoundMatcher, BoundPool, Insertion,
    PoolConfig, PromptPool, SelectorKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    IPrompt,
    QueryKey,
    Attention,
    Finetune,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::IPrompt,
        Method::QueryKey,
        Method::Attention,
        Method::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::IPrompt => "iprompt",
            Method::QueryKey => "querykey",
            Method::Attention => "attention",
            Method::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "iprompt" | "i-prompt" => Ok(Method::IPrompt),
            "querykey" | "query-key" | "querykey_baseline" => Ok(Method::QueryKey),
            "attention" | "attention_baseline" => Ok(Method::Attention),
            "finetune" => Ok(Method::Finetune),
            other => Err(Error::Usage(format!("unknown method `{other}`"))),
        }
    }
}

/// How the composed prompt enters a prompted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffsetMode {
    /// Key offsets on the attention keys, value offsets on the values.
    #[default]
    KeyValue,
    /// Key and value offsets summed and added to the layer input before its
    /// attention norm.
    PreNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub method: Method,
    pub pool: PoolConfig,
    pub offsets: OffsetMode,
    pub importance: ImportanceSource,
    /// Prompt placement for the query-key and attention baselines.
    pub insertion: Insertion,
    /// Weight of the key-pull term for the query-key baseline.
    pub key_pull: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            method: Method::IPrompt,
            pool: PoolConfig::default(),
            offsets: OffsetMode::default(),
            importance: ImportanceSource::default(),
            insertion: Insertion::Prefix,
            key_pull: 1.0,
        }
    }
}

/// Parameter counts behind the learnable/total ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub learnable: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn ratio(&self) -> f64 {
        self.learnable as f64 / self.total as f64
    }
}

enum Bound {
    Pool(BoundPool),
    Matcher(BoundMatcher),
    Backbone,
}

/// Tape state of one forward pass.
pub struct Pass {
    pub logits: Var,
    /// Extra loss term (query-key key pull), already weighted.
    pub aux: Option<Var>,
    pub head: BoundHead,
    pub trace: EncoderTrace,
    bound: Bound,
}

/// A backbone, classifier and (for prompt methods) prompt parameters.
#[derive(Debug, Clone)]
pub struct Learner {
    config: LearnerConfig,
    pub encoder: Encoder,
    pub head: HeadParams,
    pub pool: Option<PromptPool>,
    pub matcher: Option<BaselineMatcher>,
    seed: u64,
    current: Option<usize>,
}

impl Learner {
    /// Builds a learner on top of `encoder`. Prompt methods freeze it;
    /// finetuning unfreezes it.
    pub fn new(
        config: LearnerConfig,
        mut encoder: Encoder,
        num_classes: usize,
        num_tasks: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = encoder.config().embed_dim;
        let layers = encoder.config().prompted_layers.clone();
        let mut pool = None;
        let mut matcher = None;
        let mut pool_size = 0;
        match config.method {
            Method::IPrompt => {
                let p = PromptPool::new(config.pool.clone(), d, &layers, num_tasks)?;
                pool_size = p.pool_size();
                pool = Some(p);
                encoder.freeze();
            }
            Method::QueryKey | Method::Attention => {
                let kind = if config.method == Method::QueryKey {
                    SelectorKind::QueryKey
                } else {
                    SelectorKind::Attention
                };
                if config.insertion == Insertion::Prefix && layers.is_empty() {
                    return Err(Error::Usage(
                        "prefix prompts need at least one prompted layer".into(),
                    ));
                }
                matcher = Some(BaselineMatcher::new(
                    kind,
                    config.insertion,
                    d,
                    config.pool.prompt_length,
                    &layers,
                    num_tasks,
                )?);
                encoder.freeze();
            }
            Method::Finetune => encoder.unfreeze(),
        }
        let mut head = HeadParams::new(num_classes, d, pool_size, seed ^ 0x4EAD)?;
        head.source = config.importance;
        Ok(Self {
            config,
            encoder,
            head,
            pool,
            matcher,
            seed,
            current: None,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn current_task(&self) -> Option<usize> {
        self.current
    }

    /// Freezes what earlier tasks learned and initializes task `t`'s prompts.
    pub fn start_task(&mut self, t: usize) -> Result<()> {
        let expected = self.current.map_or(0, |c| c + 1);
        if t != expected {
            return Err(Error::Protocol(format!(
                "start_task({t}) out of order; expected task {expected}"
            )));
        }
        if let Some(p) = &mut self.pool {
            p.start_task(t, self.seed)?;
        }
        if let Some(m) = &mut self.matcher {
            m.start_task(t, self.seed)?;
        }
        self.current = Some(t);
        Ok(())
    }

    /// Records a forward pass. `train_task` selects the current task's prompt
    /// for the query-key baseline and adds its key-pull term.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        train_task: Option<usize>,
    ) -> Result<Pass> {
        let head = self.head.bind(tape);
        match self.config.method {
            Method::IPrompt => self.iprompt_forward(tape, images, head),
            Method::QueryKey | Method::Attention => {
                self.baseline_forward(tape, images, head, train_task)
            }
            Method::Finetune => {
                let trace = self.encoder.forward(tape, images, None, None)?;
                let logits = cls_logits(tape, &trace, &head)?;
                Ok(Pass {
                    logits,
                    aux: None,
                    head,
                    trace,
                    bound: Bound::Backbone,
                })
            }
        }
    }

    fn iprompt_forward(&self, tape: &mut Tape, images: &Tensor, head: BoundHead) -> Result<Pass> {
        let pool = self.pool.as_ref().expect("iprompt learner owns a pool");
        let bound = pool.bind(tape)?;
        let (logits, trace) = iprompt_logits(
            tape,
            &self.encoder,
            pool,
            &bound,
            &head,
            self.head.source,
            self.config.offsets,
            images,
        )?;
        Ok(Pass {
            logits,
            aux: None,
            head,
            trace,
            bound: Bound::Pool(bound),
        })
    }

    fn baseline_forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        head: BoundHead,
        train_task: Option<usize>,
    ) -> Result<Pass> {
        let matcher = self
            .matcher
            .as_ref()
            .expect("baseline learner owns a matcher");
        let lp = matcher.prompt_length();
        let q = self.encoder.cls_features(images)?;
        let batch = q.shape()[0];
        let qv = tape.constant(&q);
        let bound = matcher.bind(tape)?;
        let mut aux = None;
        let blocks: Vec<Var> = match matcher.kind() {
            SelectorKind::QueryKey => {
                let tasks = match train_task {
                    Some(t) => {
                        let pull = key_pull_loss(tape, qv, &bound, t)?;
                        aux = Some(tape.scale(pull, self.config.key_pull)?);
                        vec![t; batch]
                    }
                    None => querykey_select_batch(&q, matcher, matcher.tasks_seen())?,
                };
                bound
                    .stacked
                    .iter()
                    .map(|&st| gather_blocks(tape, st, &tasks, lp))
                    .collect::<Result<_>>()?
            }
            SelectorKind::Attention => attention_prompts(tape, qv, &bound, lp)?,
        };
        let trace = match matcher.insertion() {
            Insertion::Prefix => {
                let mut hook =
                    |tape: &mut Tape, layer: usize, _hk: Var| -> Result<Option<LayerPrompt>> {
                        match matcher.slot(layer) {
                            Some(s) => Ok(Some(prefix_prompt(tape, blocks[s], batch, lp)?)),
                            None => Ok(None),
                        }
                    };
                self.encoder.forward(tape, images, None, Some(&mut hook))?
            }
            Insertion::PromptTuning => {
                let rows = input_prompt_rows(tape, blocks[0], batch, lp)?;
                self.encoder.forward(tape, images, Some((rows, lp)), None)?
            }
        };
        let logits = cls_logits(tape, &trace, &head)?;
        Ok(Pass {
            logits,
            aux,
            head,
            trace,
            bound: Bound::Matcher(bound),
        })
    }

    /// Forward, masked loss and backward for one batch; gradients land in the
    /// parameter buffers. Returns the loss.
    pub fn accumulate_step(
        &mut self,
        images: &Tensor,
        labels: &[usize],
        mask: &LogitMask,
    ) -> Result<f64> {
        let task = self
            .current
            .ok_or_else(|| Error::Protocol("training before start_task".into()))?;
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, images, Some(task))?;
        let ce = masked_loss_on_tape(&mut tape, pass.logits, mask, labels)?;
        let loss = match pass.aux {
            Some(a) => tape.add(ce, a)?,
            None => ce,
        };
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {value} in task {task}"
            )));
        }
        tape.backward(loss)?;
        self.head.accumulate_grads(&tape, &pass.head)?;
        match &pass.bound {
            Bound::Pool(b) => self
                .pool
                .as_mut()
                .expect("pool")
                .accumulate_grads(&tape, b)?,
            Bound::Matcher(b) => self
                .matcher
                .as_mut()
                .expect("matcher")
                .accumulate_grads(&tape, b)?,
            Bound::Backbone => self.encoder.accumulate_grads(&tape, &pass.trace)?,
        }
        Ok(value)
    }

    /// Tensors the optimizer updates, in a fixed order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .head
            .tensors_mut()
            .into_iter()
            .filter(|t| !t.is_empty())
            .collect();
        if let Some(p) = &mut self.pool {
            out.extend(p.trainable_mut());
        }
        if let Some(m) = &mut self.matcher {
            out.extend(m.trainable_mut());
        }
        if self.config.method == Method::Finetune {
            out.extend(self.encoder.params_mut().tensors_mut());
        }
        out
    }

    /// Masked logits for `images`, `[batch × C]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, images, None)?;
        Ok(tape.tensor(pass.logits))
    }

    /// Highest-scoring allowed class per image; ties go to the lower id.
    pub fn predict(&self, images: &Tensor, mask: &LogitMask) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        let (b, c) = logits.rows_cols();
        if mask.allowed().len() != c {
            return Err(Error::InvalidMask(format!(
                "mask over {} classes, logits have {c}",
                mask.allowed().len()
            )));
        }
        Ok((0..b)
            .map(|i| {
                let mut best: Option<(usize, f64)> = None;
                for (j, &v) in logits.row(i).iter().enumerate() {
                    if mask.contains(j) && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                best.map_or(0, |(j, _)| j)
            })
            .collect())
    }

    /// Learnable scalars against the whole model, backbone included.
    pub fn param_counts(&self) -> ParamCounts {
        let d = self.encoder.config().embed_dim;
        let c = self.num_classes();
        let classifier = c * d + c;
        let backbone = self.encoder.params().param_count();
        let learnable = match self.config.method {
            Method::IPrompt => {
                let pool = self.pool.as_ref().expect("pool");
                pool.learnable_count() + classifier + pool.pool_size()
            }
            Method::QueryKey | Method::Attention => {
                self.matcher.as_ref().expect("matcher").learnable_count() + classifier
            }
            Method::Finetune => backbone + classifier,
        };
        let total = match self.config.method {
            Method::Finetune => learnable,
            _ => backbone + learnable,
        };
        ParamCounts { learnable, total }
    }
}

/// Single-pass prompted forward: every prompted layer matches its tokens'
/// attention keys against the pool, adds the composed offsets, and the last
/// (or first) prompted layer's similarities weight the image tokens feeding
/// the classifier.
#[allow(clippy::too_many_arguments)]
pub fn iprompt_logits(
    tape: &mut Tape,
    encoder: &Encoder,
    pool: &PromptPool,
    bound: &BoundPool,
    head: &BoundHead,
    source: ImportanceSource,
    offsets: OffsetMode,
    images: &Tensor,
) -> Result<(Var, EncoderTrace)> {
    let tokens = encoder.config().num_tokens();
    let lp = pool.prompt_length();
    let mut sims: BTreeMap<usize, Var> = BTreeMap::new();
    let mut hook = |tape: &mut Tape, layer: usize, hk: Var| -> Result<Option<LayerPrompt>> {
        let Some(bp) = bound.get(pool.pool_index(layer)?) else {
            return Ok(None);
        };
        let (w, prompt) = semantic_prompt(tape, hk, bp, lp, tokens)?;
        sims.insert(layer, w);
        Ok(Some(match (offsets, prompt) {
            (OffsetMode::PreNorm, LayerPrompt::Additive { key, value }) => LayerPrompt::PreNorm {
                offset: tape.add(key, value)?,
            },
            (_, p) => p,
        }))
    };
    let trace = encoder.forward(tape, images, None, Some(&mut hook))?;
    let batch = trace.batch;
    let picked = match source {
        ImportanceSource::LastPrompted => sims.values().next_back(),
        ImportanceSource::FirstPrompted => sims.values().next(),
    };
    let s_x = match picked {
        Some(&sim) if tape.shape(head.importance)[0] > 0 => {
            let n = tape.shape(sim)[1];
            let ws = active_importance(tape, head.importance, n)?;
            importance_on_tape(tape, sim, ws, batch, tokens)?
        }
        _ => uniform_importance(tape, batch, tokens)?,
    };
    let h_hat = aggregate_on_tape(tape, trace.output, s_x, tokens)?;
    let logits = logits_on_tape(tape, h_hat, head)?;
    Ok((logits, trace))
}

fn cls_logits(tape: &mut Tape, trace: &EncoderTrace, head: &BoundHead) -> Result<Var> {
    let cls = tape.select_rows(trace.output, &trace.cls_rows())?;
    logits_on_tape(tape, cls, head)
}
