//! Generates the blob-pattern classes, writes them in the IPDS format and
//! reads them back.

use iprompt::data::{generate_split, load, save, Split, SyntheticSpec, CRC_LEN, HEADER_LEN};

fn main() -> iprompt::Result<()> {
    let spec = SyntheticSpec {
        num_classes: 6,
        per_class_count: 10,
        image_size: 16,
        ..SyntheticSpec::default()
    };
    let train = generate_split(&spec, Split::Train)?;
    let test = generate_split(&spec, Split::Test)?;
    println!(
        "{} train / {} test images, counts {:?}",
        train.len(),
        test.len(),
        train.class_counts()
    );

    // coarse view of one image's first channel
    let img = train.image(0);
    for y in (0..16).step_by(2) {
        let row: String = (0..16)
            .step_by(2)
            .map(|x| match img[y * 16 + x] {
                0..=63 => ' ',
                64..=127 => '.',
                128..=191 => 'o',
                _ => '@',
            })
            .collect();
        println!("  |{row}|");
    }

    let dir = tempfile_dir();
    let path = dir.join("train.ipds");
    save(&path, &train)?;
    let back = load(&path)?;
    let bytes = std::fs::metadata(&path)?.len() as usize;
    println!(
        "{} bytes on disk = {HEADER_LEN} header + {} pixels + {} labels + {CRC_LEN} checksum",
        bytes,
        train.pixels().len(),
        4 * train.len()
    );
    println!(
        "round trip identical: {}",
        back.pixels() == train.pixels() && back.labels() == train.labels()
    );
    std::fs::remove_dir_all(dir)?;
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("iprompt-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}
