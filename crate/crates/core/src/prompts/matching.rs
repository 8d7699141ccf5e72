use crate::encoder::LayerPrompt;
use crate::error::{Error, Result};
use crate::numerics::ops::COSINE_EPS;
use crate::numerics::{Tape, Tensor, Var};

use super::pool::{BoundLayerPool, PromptPool};

/// `weights[r][i] = cos(h_k[r], k_i)` for every token row against every
/// active prompt key.
pub fn semantic_weights(tape: &mut Tape, hk: Var, keys: Var) -> Result<Var> {
    tape.cosine_matrix(hk, keys, COSINE_EPS)
}

/// Weighted prompt sum per token, split into key and value offsets.
///
/// The `L_p` key rows of each prompt are summed into one key offset, the `L_p`
/// value rows into one value offset. Class-token rows (the first of every
/// `tokens_per_item`) are zeroed.
pub fn compose_offsets(
    tape: &mut Tape,
    weights: Var,
    prompts: Var,
    prompt_length: usize,
    dim: usize,
    tokens_per_item: usize,
) -> Result<(Var, Var)> {
    let rows = tape.shape(weights)[0];
    if tokens_per_item == 0 || rows % tokens_per_item != 0 {
        return Err(Error::dim(format!(
            "{rows} weight rows are not whole items of {tokens_per_item} tokens"
        )));
    }
    let pk = tape.sum_col_blocks(prompts, dim, 0, prompt_length)?;
    let pv = tape.sum_col_blocks(prompts, dim, prompt_length, 2 * prompt_length)?;
    let keep: Vec<bool> = (0..rows).map(|r| r % tokens_per_item != 0).collect();
    let key = tape.matmul(weights, pk)?;
    let key = tape.mask_rows(key, &keep)?;
    let value = tape.matmul(weights, pv)?;
    let value = tape.mask_rows(value, &keep)?;
    Ok((key, value))
}

/// Full matching step used inside the encoder hook: returns the similarity
/// weights and the additive prompt for the layer.
pub fn semantic_prompt(
    tape: &mut Tape,
    hk: Var,
    bound: &BoundLayerPool,
    prompt_length: usize,
    tokens_per_item: usize,
) -> Result<(Var, LayerPrompt)> {
    let dim = tape.shape(hk)[1];
    let w = semantic_weights(tape, hk, bound.keys)?;
    let (key, value) =
        compose_offsets(tape, w, bound.prompts, prompt_length, dim, tokens_per_item)?;
    Ok((w, LayerPrompt::Additive { key, value }))
}

/// Cosine weights of one image's keys `[(p+1) × d]` against the active keys
/// of the pool serving `layer`.
pub fn semantic_match(h_k: &Tensor, pool: &PromptPool, layer: usize) -> Result<Tensor> {
    let idx = pool.pool_index(layer)?;
    if pool.active_len() == 0 {
        return Err(Error::State(
            "no active prompts; call start_task first".into(),
        ));
    }
    let mut tape = Tape::new();
    let hk = tape.constant(h_k);
    let keys = tape.constant(&pool.active_keys(idx)?);
    let w = semantic_weights(&mut tape, hk, keys)?;
    Ok(tape.tensor(w))
}

/// Key and value offsets for one image from `weights` `[(p+1) × active]`.
/// Requires `t` to be the task in training (all earlier chunks frozen).
pub fn compose_prompt(
    weights: &Tensor,
    pool: &PromptPool,
    layer: usize,
    t: usize,
) -> Result<(Tensor, Tensor)> {
    if pool.frozen_upto() != Some(t) {
        return Err(Error::State(format!(
            "compose for task {t} but the pool is at {:?}",
            pool.frozen_upto()
        )));
    }
    let idx = pool.pool_index(layer)?;
    let (rows, cols) = weights.rows_cols();
    if weights.shape().len() != 2 || cols != pool.active_len() {
        return Err(Error::dim(format!(
            "weights {:?} do not cover {} active prompts",
            weights.shape(),
            pool.active_len()
        )));
    }
    let mut tape = Tape::new();
    let w = tape.constant(weights);
    let p = tape.constant(&pool.active_prompts(idx)?);
    let (k, v) = compose_offsets(&mut tape, w, p, pool.prompt_length(), pool.dim(), rows)?;
    Ok((tape.tensor(k), tape.tensor(v)))
}
