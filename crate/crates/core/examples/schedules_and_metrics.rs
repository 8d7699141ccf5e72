//! Class-incremental schedules and the accuracy metrics.

use iprompt::harness::{auc_acc, avg_acc, build_schedule, last_acc};

fn main() -> iprompt::Result<()> {
    for spec in [
        "B50-Inc10",
        "B0-Inc10",
        "uniform",
        "increasing",
        "decreasing",
        "fluctuating",
        "random-increase",
    ] {
        let s = build_schedule(spec, 100, 0)?;
        println!("{spec:<16} {} tasks, sizes {:?}", s.num_tasks(), s.sizes());
    }
    let s = build_schedule("B0-Inc2", 8, 42)?;
    println!("B0-Inc2 over 8 classes, seed 42: {:?}", s.tasks);

    let joint = [0.95, 0.81, 0.74, 0.70];
    println!("avg {:.4}, last {:.4}", avg_acc(&joint)?, last_acc(&joint)?);
    let curve = [(100, 0.9), (200, 0.8), (300, 0.75), (400, 0.7)];
    println!("AUC over the online curve {:.4}", auc_acc(&curve)?);
    Ok(())
}
