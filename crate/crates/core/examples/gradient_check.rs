//! Checks the tape gradients of the full prompted loss against central
//! finite differences, then differentiates a small hand-written function.

use iprompt::numerics::{grad_check, Tape, Tensor, DEFAULT_STEP};
use iprompt::verify::iprompt_gradient_check;

fn main() -> iprompt::Result<()> {
    // softmax cross-entropy of a 2×3 logit matrix
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4]])?;
    let err = grad_check(
        |t: &mut Tape, v| t.cross_entropy(v, &[2, 0]),
        &x,
        DEFAULT_STEP,
    )?;
    println!("cross-entropy: max relative error {err:.2e}");

    for seed in 0..3 {
        let err = iprompt_gradient_check(seed)?;
        println!("prompted loss, seed {seed}: max relative error {err:.2e}");
    }
    Ok(())
}
