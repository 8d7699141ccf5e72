//! Builds a prompt pool over two tasks, matches one image's attention keys
//! against it and composes the per-token offsets and token importance.

use iprompt::encoder::{Encoder, EncoderConfig};
use iprompt::head::importance_weights;
use iprompt::numerics::{Tape, Tensor};
use iprompt::prompts::{compose_prompt, semantic_match, PoolConfig, PromptPool};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> iprompt::Result<()> {
    let cfg = EncoderConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        num_heads: 2,
        num_layers: 2,
        prompted_layers: vec![0, 1],
        ..EncoderConfig::default()
    };
    let encoder = Encoder::new(cfg.clone(), 3)?;
    let mut pool = PromptPool::new(
        PoolConfig {
            pool_size: 6,
            prompt_length: 2,
            shared: false,
        },
        cfg.embed_dim,
        &cfg.prompted_layers,
        2,
    )?;
    pool.start_task(0, 9)?;
    pool.start_task(1, 9)?;
    println!(
        "chunks {:?}, {} prompts active",
        pool.chunks(),
        pool.active_len()
    );

    // attention keys of layer 1 for one image
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = Tensor::uniform(&[1, 3, 16, 16], 1.0, &mut rng);
    let mut tape = Tape::new();
    let trace = encoder.forward(&mut tape, &image, None, None)?;
    let h_k = tape.tensor(trace.keys[&1]);

    let w = semantic_match(&h_k, &pool, 1)?;
    println!("similarity of each token to each key:");
    for r in 0..w.shape()[0] {
        let row: Vec<String> = w.row(r).iter().map(|v| format!("{v:+.2}")).collect();
        println!("  token {r}: {}", row.join(" "));
    }

    let (key, value) = compose_prompt(&w, &pool, 1, 1)?;
    println!(
        "key offsets {:?}, value offsets {:?}",
        key.shape(),
        value.shape()
    );
    println!(
        "class-token offsets are zero: {}",
        key.row(0).iter().all(|&v| v == 0.0)
    );

    let w_s = Tensor::vector(vec![2.0, -1.0, 0.5, 0.0, 1.0, -0.5]);
    let s = importance_weights(&h_k, &pool.active_keys(1)?, &w_s)?;
    println!(
        "token importance: {:?}",
        s.data()
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
    );
    Ok(())
}
