//! The desk benchmark: eight synthetic classes in four tasks, I-Prompt
//! against the baselines on one shared frozen backbone.
//!
//! `cargo run --release --example continual_benchmark -- [schedule] [seeds]`

use iprompt::config::ExperimentConfig;
use iprompt::data::{generate_split, Split, SyntheticSpec};
use iprompt::harness::{
    build_schedule, pretrain_backbone, run_continual, summary_table, LearnerConfig, Method, RunSpec,
};

fn main() -> iprompt::Result<()> {
    let mut args = std::env::args().skip(1);
    let schedule_spec = args.next().unwrap_or_else(|| "B0-Inc2".into());
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);

    let cfg = ExperimentConfig::default();
    let (size, ch) = (cfg.encoder.image_size, cfg.encoder.channels);
    let pre = cfg.data.pretrain_spec(size, ch);
    let pre_test = SyntheticSpec {
        per_class_count: 10,
        ..pre.clone()
    };
    let (backbone, acc) = pretrain_backbone(
        &generate_split(&pre, Split::Pretrain)?,
        &generate_split(&pre_test, Split::Test)?,
        cfg.encoder.clone(),
        &cfg.pretrain,
    )?;
    println!(
        "backbone: {:.1}% on the pretraining test split",
        100.0 * acc
    );

    let spec = cfg.data.continual_spec(size, ch);
    let train = generate_split(&spec, Split::Train)?;
    let test = generate_split(&spec, Split::Test)?;
    let mut reports = Vec::new();
    for seed in 0..seeds {
        let schedule = build_schedule(&schedule_spec, cfg.data.classes, seed)?;
        for method in Method::ALL {
            let run = RunSpec {
                train: &train,
                test: &test,
                schedule: &schedule,
                backbone: &backbone,
                learner: LearnerConfig {
                    method,
                    ..cfg.learner.clone()
                },
                train_cfg: cfg.training.clone(),
                seed,
            };
            let (r, _) = run_continual(&run, None)?;
            println!(
                "seed {seed} {method:<9} joint accuracy per task {:?}",
                r.joint_acc
                    .iter()
                    .map(|a| format!("{:.1}", 100.0 * a))
                    .collect::<Vec<_>>()
            );
            reports.push(r);
        }
    }
    print!("{}", summary_table(&reports));
    Ok(())
}
