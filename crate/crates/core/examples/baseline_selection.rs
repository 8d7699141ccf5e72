//! Query-key and attention-weighted prompt selection, the two classic
//! query-function baselines.

use iprompt::numerics::Tensor;
use iprompt::prompts::{
    attention_select, querykey_select, BaselineMatcher, Insertion, SelectorKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> iprompt::Result<()> {
    let (d, lp, tasks) = (8, 2, 3);
    let mut qk = BaselineMatcher::new(
        SelectorKind::QueryKey,
        Insertion::Prefix,
        d,
        lp,
        &[0, 1],
        tasks,
    )?;
    let mut att = BaselineMatcher::new(
        SelectorKind::Attention,
        Insertion::Prefix,
        d,
        lp,
        &[0, 1],
        tasks,
    )?;
    for t in 0..tasks {
        qk.start_task(t, 1)?;
        att.start_task(t, 1)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..4 {
        let q = Tensor::normal(&[d], 1.0, &mut rng);
        println!(
            "query {i}: query-key picks task {}",
            querykey_select(&q, &qk, tasks)?
        );
    }
    // a query equal to task 2's key
    println!(
        "key 2 as query picks task {}",
        querykey_select(&qk.keys[2].clone(), &qk, tasks)?
    );

    let q = Tensor::normal(&[d], 1.0, &mut rng);
    let mixed = attention_select(&q, &att, tasks)?;
    println!(
        "attention mix: {} layer blocks of {:?}; learnable scalars {} (query-key {})",
        mixed.len(),
        mixed[0].shape(),
        att.learnable_count(),
        qk.learnable_count()
    );
    Ok(())
}
