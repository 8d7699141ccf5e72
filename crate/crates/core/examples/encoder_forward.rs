//! Runs the miniature vision transformer with and without a prompt hook and
//! shows what each prompted layer hands to the hook.

use iprompt::encoder::{Encoder, EncoderConfig, LayerPrompt};
use iprompt::numerics::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> iprompt::Result<()> {
    let cfg = EncoderConfig::default();
    let encoder = Encoder::new(cfg.clone(), 0)?;
    println!(
        "{} tokens per image, d = {}, {} layers, {} parameters",
        cfg.num_tokens(),
        cfg.embed_dim,
        cfg.num_layers,
        encoder.params().param_count()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = Tensor::uniform(
        &[2, cfg.channels, cfg.image_size, cfg.image_size],
        1.0,
        &mut rng,
    );

    let mut tape = Tape::new();
    let plain = encoder.forward(&mut tape, &images, None, None)?;
    let plain_cls = tape.select_rows(plain.output, &plain.cls_rows())?;

    // shift every image token's value by a constant
    let d = cfg.embed_dim;
    let rows = 2 * cfg.num_tokens();
    let mut hook = |t: &mut Tape, layer: usize, hk: Var| -> iprompt::Result<Option<LayerPrompt>> {
        println!("layer {layer}: keys {:?}", t.shape(hk));
        let key = t.constant(&Tensor::zeros(&[rows, d]));
        let value = t.constant(&Tensor::full(&[rows, d], 0.05));
        Ok(Some(LayerPrompt::Additive { key, value }))
    };
    let prompted = encoder.forward(&mut tape, &images, None, Some(&mut hook))?;
    let prompted_cls = tape.select_rows(prompted.output, &prompted.cls_rows())?;

    let moved = tape
        .tensor(plain_cls)
        .max_abs_diff(&tape.tensor(prompted_cls));
    println!("largest CLS change from the value shift: {moved:.4}");
    println!("encoder passes so far: {}", encoder.forward_passes());
    Ok(())
}
