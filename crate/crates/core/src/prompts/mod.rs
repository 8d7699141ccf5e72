//! Prompt pools, semantic matching, and the query-function baselines.

mod baseline;
mod matching;
mod pool;

pub use baseline::{
    attention_prompts, attention_select, gather_blocks, input_prompt_rows, key_pull_loss,
    prefix_prompt, querykey_select, querykey_select_batch, BaselineMatcher, BoundMatcher,
    Insertion, SelectorKind,
};
pub use matching::{
    compose_offsets, compose_prompt, semantic_match, semantic_prompt, semantic_weights,
};
pub use pool::{
    chunk_sizes, BoundLayerPool, BoundPool, LayerPool, PoolConfig, PromptPool, PROMPT_INIT,
};

pub use crate::encoder::insert_prompt_tuning;

#[cfg(test)]
mod tests;
