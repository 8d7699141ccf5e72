use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Init bound for prompt values.
pub const PROMPT_INIT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PoolConfig {
    /// Total prompts per pool, `S`.
    pub pool_size: usize,
    /// Prompt length `L_p`; each prompt holds `2·L_p` rows.
    pub prompt_length: usize,
    /// One pool for all prompted layers instead of one per layer.
    pub shared: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            pool_size: 20,
            prompt_length: 2,
            shared: false,
        }
    }
}

/// Keys and prompts of one pool, stored per task chunk.
///
/// Chunk `t` keys are `[n_t × d]`; its prompts are `[n_t × 2·L_p·d]`, each
/// row holding `L_p` key-offset rows followed by `L_p` value-offset rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPool {
    pub keys: Vec<Tensor>,
    pub prompts: Vec<Tensor>,
}

/// Learnable prompt keys and prompts, grown and frozen task by task.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    config: PoolConfig,
    dim: usize,
    layers: Vec<usize>,
    chunks: Vec<Range<usize>>,
    pools: Vec<LayerPool>,
    current: Option<usize>,
}

/// Tape handles for one pool's active prompts (chunks up to the current task).
#[derive(Debug, Clone)]
pub struct BoundLayerPool {
    /// `[active × d]`, frozen chunks first.
    pub keys: Var,
    /// `[active × 2·L_p·d]`.
    pub prompts: Var,
    current_keys: Option<Var>,
    current_prompts: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct BoundPool {
    /// `None` when no prompt is active yet.
    pub pools: Vec<Option<BoundLayerPool>>,
}

/// Equal split of `pool_size` over `tasks`; the remainder goes to the last task.
pub fn chunk_sizes(pool_size: usize, tasks: usize) -> Vec<usize> {
    if tasks == 0 {
        return Vec::new();
    }
    let base = pool_size / tasks;
    let mut sizes = vec![base; tasks];
    sizes[tasks - 1] += pool_size - base * tasks;
    sizes
}

fn task_seed(seed: u64, t: usize) -> u64 {
    seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl PromptPool {
    /// Empty pool for `layers` (the prompted layer indices) over `num_tasks`
    /// planned tasks. No chunk is usable before [`PromptPool::start_task`].
    pub fn new(config: PoolConfig, dim: usize, layers: &[usize], num_tasks: usize) -> Result<Self> {
        if config.prompt_length == 0 && config.pool_size > 0 {
            return Err(Error::Usage("prompt_length must be positive".into()));
        }
        if num_tasks == 0 {
            return Err(Error::Usage("a prompt pool needs at least one task".into()));
        }
        if dim == 0 {
            return Err(Error::Usage("embedding dimension must be positive".into()));
        }
        let sizes = chunk_sizes(config.pool_size, num_tasks);
        let mut start = 0;
        let chunks = sizes
            .iter()
            .map(|&n| {
                start += n;
                start - n..start
            })
            .collect();
        let n_pools = if config.shared {
            1.min(layers.len())
        } else {
            layers.len()
        };
        let width = 2 * config.prompt_length * dim;
        let pools = (0..n_pools)
            .map(|_| LayerPool {
                keys: sizes.iter().map(|&n| Tensor::zeros(&[n, dim])).collect(),
                prompts: sizes.iter().map(|&n| Tensor::zeros(&[n, width])).collect(),
            })
            .collect();
        Ok(Self {
            config,
            dim,
            layers: layers.to_vec(),
            chunks,
            pools,
            current: None,
        })
    }

    pub(crate) fn from_parts(
        config: PoolConfig,
        dim: usize,
        layers: Vec<usize>,
        chunks: Vec<Range<usize>>,
        pools: Vec<LayerPool>,
        current: Option<usize>,
    ) -> Result<Self> {
        let mut pool = Self::new(config, dim, &layers, chunks.len().max(1))?;
        if pool.chunks != chunks || pool.pools.len() != pools.len() {
            return Err(Error::Format(
                "pool chunk table does not match its config".into(),
            ));
        }
        for (a, b) in pool.pools.iter().zip(&pools) {
            let shapes = |p: &LayerPool| -> Vec<Vec<usize>> {
                p.keys
                    .iter()
                    .chain(&p.prompts)
                    .map(|t| t.shape().to_vec())
                    .collect()
            };
            if shapes(a) != shapes(b) {
                return Err(Error::Format(
                    "pool tensor shapes do not match its config".into(),
                ));
            }
        }
        if current.is_some_and(|t| t >= chunks.len()) {
            return Err(Error::Format("pool task index out of range".into()));
        }
        pool.pools = pools;
        pool.current = current;
        pool.refresh_grad_flags();
        Ok(pool)
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn pool_size(&self) -> usize {
        self.config.pool_size
    }

    pub fn prompt_length(&self) -> usize {
        self.config.prompt_length
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn num_tasks(&self) -> usize {
        self.chunks.len()
    }

    pub fn num_pools(&self) -> usize {
        self.pools.len()
    }

    pub fn pools(&self) -> &[LayerPool] {
        &self.pools
    }

    pub fn chunks(&self) -> &[Range<usize>] {
        &self.chunks
    }

    /// Task currently being learned; every earlier chunk is frozen.
    pub fn frozen_upto(&self) -> Option<usize> {
        self.current
    }

    /// Task owning prompt `i`.
    pub fn chunk_of(&self, i: usize) -> Option<usize> {
        self.chunks.iter().position(|r| r.contains(&i))
    }

    /// Number of prompts visible to matching: chunks `0..=current`.
    pub fn active_len(&self) -> usize {
        self.current.map_or(0, |t| self.chunks[t].end)
    }

    /// Index of the pool serving prompted layer `layer`.
    pub fn pool_index(&self, layer: usize) -> Result<usize> {
        let pos = self
            .layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::Usage(format!("layer {layer} is not prompted")))?;
        Ok(if self.config.shared { 0 } else { pos })
    }

    /// Learnable scalars across all pools: `S·(2·L_p + 1)·d` per pool.
    pub fn learnable_count(&self) -> usize {
        self.pools.len() * self.config.pool_size * (2 * self.config.prompt_length + 1) * self.dim
    }

    /// Freezes chunks before `t` and initializes chunk `t`: prompts uniform in
    /// `±0.02`, keys random unit vectors.
    pub fn start_task(&mut self, t: usize, seed: u64) -> Result<()> {
        let expected = self.current.map_or(0, |c| c + 1);
        if t != expected {
            return Err(Error::Protocol(format!(
                "start_task({t}) out of order; expected task {expected}"
            )));
        }
        if t >= self.chunks.len() {
            return Err(Error::Protocol(format!(
                "task {t} exceeds the {} planned tasks",
                self.chunks.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(seed, t));
        let (n, d) = (self.chunks[t].len(), self.dim);
        let width = 2 * self.config.prompt_length * d;
        for pool in &mut self.pools {
            pool.prompts[t] = Tensor::uniform(&[n, width], PROMPT_INIT, &mut rng);
            let mut keys = Tensor::normal(&[n, d], 1.0, &mut rng);
            for row in keys.data_mut().chunks_mut(d.max(1)) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
            pool.keys[t] = keys;
        }
        self.current = Some(t);
        self.refresh_grad_flags();
        Ok(())
    }

    fn refresh_grad_flags(&mut self) {
        let current = self.current;
        for pool in &mut self.pools {
            for (t, (k, p)) in pool.keys.iter_mut().zip(&mut pool.prompts).enumerate() {
                let live = Some(t) == current;
                k.set_requires_grad(live);
                p.set_requires_grad(live);
            }
        }
    }

    /// Active keys of one pool, `[active × d]`.
    pub fn active_keys(&self, pool: usize) -> Result<Tensor> {
        self.gather(pool, |p| &p.keys, self.dim)
    }

    /// Active prompts of one pool, `[active × 2·L_p·d]`.
    pub fn active_prompts(&self, pool: usize) -> Result<Tensor> {
        self.gather(
            pool,
            |p| &p.prompts,
            2 * self.config.prompt_length * self.dim,
        )
    }

    fn gather(
        &self,
        pool: usize,
        pick: impl Fn(&LayerPool) -> &Vec<Tensor>,
        width: usize,
    ) -> Result<Tensor> {
        let p = self
            .pools
            .get(pool)
            .ok_or_else(|| Error::Usage(format!("no pool {pool}")))?;
        let upto = self.current.map_or(0, |t| t + 1);
        let data: Vec<f64> = pick(p)[..upto]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        Tensor::new(&[self.active_len(), width], data)
    }

    /// Tensors trained for the current task (keys then prompts, per pool).
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let Some(t) = self.current else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for pool in &mut self.pools {
            if pool.keys[t].is_empty() {
                continue;
            }
            let (k, p) = (&mut pool.keys[t], &mut pool.prompts[t]);
            out.push(k);
            out.push(p);
        }
        out
    }

    /// Records the active prompts on `tape`. Frozen chunks enter as constants.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundPool> {
        let mut pools = Vec::with_capacity(self.pools.len());
        for pool in &self.pools {
            let Some(cur) = self.current else {
                pools.push(None);
                continue;
            };
            let (mut keys, mut prompts) = (Vec::new(), Vec::new());
            let (mut ck, mut cp) = (None, None);
            for t in 0..=cur {
                if pool.keys[t].is_empty() {
                    continue;
                }
                let k = tape.leaf(&pool.keys[t]);
                let p = tape.leaf(&pool.prompts[t]);
                if t == cur {
                    ck = Some(k);
                    cp = Some(p);
                }
                keys.push(k);
                prompts.push(p);
            }
            if keys.is_empty() {
                pools.push(None);
                continue;
            }
            let keys = if keys.len() == 1 {
                keys[0]
            } else {
                tape.concat_rows(&keys)?
            };
            let prompts = if prompts.len() == 1 {
                prompts[0]
            } else {
                tape.concat_rows(&prompts)?
            };
            pools.push(Some(BoundLayerPool {
                keys,
                prompts,
                current_keys: ck,
                current_prompts: cp,
            }));
        }
        Ok(BoundPool { pools })
    }

    /// Pulls the current chunk's gradients from `tape`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundPool) -> Result<()> {
        let Some(t) = self.current else {
            return Ok(());
        };
        for (pool, b) in self.pools.iter_mut().zip(&bound.pools) {
            if let Some(b) = b {
                if let (Some(k), Some(p)) = (b.current_keys, b.current_prompts) {
                    tape.accumulate_into(k, &mut pool.keys[t])?;
                    tape.accumulate_into(p, &mut pool.prompts[t])?;
                }
            }
        }
        Ok(())
    }

    /// Byte image of chunk `t` across all pools.
    pub fn chunk_bytes(&self, t: usize) -> Vec<u8> {
        self.pools
            .iter()
            .flat_map(|p| {
                let mut b = p.keys[t].to_le_bytes();
                b.extend(p.prompts[t].to_le_bytes());
                b
            })
            .collect()
    }
}

#[cfg(test)]
impl PromptPool {
    pub(crate) fn pools_mut(&mut self) -> &mut [LayerPool] {
        &mut self.pools
    }
}

impl BoundLayerPool {
    /// Handles built elsewhere on the tape, e.g. inputs of a gradient check.
    pub fn from_vars(keys: Var, prompts: Var) -> Self {
        Self {
            keys,
            prompts,
            current_keys: None,
            current_prompts: None,
        }
    }
}

impl BoundPool {
    pub fn get(&self, pool: usize) -> Option<&BoundLayerPool> {
        self.pools.get(pool).and_then(|p| p.as_ref())
    }
}
