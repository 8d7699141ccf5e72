//! Pretrains the backbone on its own classes and saves a frozen snapshot.
//! Pass a path to keep the snapshot.

use iprompt::config::ExperimentConfig;
use iprompt::data::{generate_split, Split, SyntheticSpec};
use iprompt::harness::pretrain_backbone;
use iprompt::snapshot;

fn main() -> iprompt::Result<()> {
    let cfg = ExperimentConfig::default();
    let (size, ch) = (cfg.encoder.image_size, cfg.encoder.channels);
    let spec = SyntheticSpec {
        num_classes: 16,
        ..cfg.data.pretrain_spec(size, ch)
    };
    let train = generate_split(&spec, Split::Pretrain)?;
    let test = generate_split(
        &SyntheticSpec {
            per_class_count: 10,
            ..spec.clone()
        },
        Split::Test,
    )?;
    let start = std::time::Instant::now();
    let (encoder, acc) = pretrain_backbone(&train, &test, cfg.encoder.clone(), &cfg.pretrain)?;
    println!(
        "{} classes, test accuracy {:.1}%, {:.1}s, frozen: {}",
        spec.num_classes,
        100.0 * acc,
        start.elapsed().as_secs_f64(),
        encoder.is_frozen()
    );
    let path = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("iprompt-backbone.ipvt"));
    snapshot::save(&path, &encoder, None)?;
    println!("saved {}", path.display());
    Ok(())
}
