//! Parses an experiment config, reports a diagnostic for a bad key, and
//! prints the canonical form.

use iprompt::config::ExperimentConfig;

const TEXT: &str = "\
version = 1
seed = 7

[prompt]
method = iprompt
pool_size = 12
offsets = prenorm

[schedule]
spec = fluctuating

[data]
classes = 10
";

fn main() -> iprompt::Result<()> {
    let cfg = ExperimentConfig::parse(TEXT)?;
    println!(
        "method {}, pool {}, schedule {}, seed {}",
        cfg.learner.method, cfg.learner.pool.pool_size, cfg.schedule, cfg.seed
    );

    let bad = TEXT.replace("pool_size", "pool_sise");
    match ExperimentConfig::parse(&bad) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }

    println!("--- canonical form ---\n{}", cfg.to_text());
    Ok(())
}
