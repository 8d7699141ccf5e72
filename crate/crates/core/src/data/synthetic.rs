use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};
use crate::error::{Error, Result};

/// Parameters of the Gaussian-blob class generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class_count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Pixel noise standard deviation, in 0..255 units.
    pub noise: f64,
    /// Per-sample blob centre jitter, as a fraction of the image side.
    pub jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 16,
            per_class_count: 40,
            image_size: 32,
            channels: 3,
            seed: 0,
            noise: 12.0,
            jitter: 0.06,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::Usage(
                "classes, image size and channels must be positive".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.jitter >= 0.0 && self.jitter < 0.5)
        {
            return Err(Error::Usage(format!(
                "noise {} / jitter {} out of range",
                self.noise, self.jitter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    scale: f64,
    color: Vec<f64>,
}

/// A class: background colour plus two to four coloured blobs.
#[derive(Debug, Clone)]
struct Recipe {
    background: Vec<f64>,
    blobs: Vec<Blob>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn recipe(spec: &SyntheticSpec, class: usize) -> Recipe {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, class as u64 + 1));
    let background = (0..spec.channels)
        .map(|_| rng.random_range(0.0..0.25))
        .collect();
    let n = rng.random_range(2..=4);
    let blobs = (0..n)
        .map(|_| Blob {
            cx: rng.random_range(0.15..0.85),
            cy: rng.random_range(0.15..0.85),
            scale: rng.random_range(0.08..0.22),
            color: (0..spec.channels)
                .map(|_| rng.random_range(0.1..1.0))
                .collect(),
        })
        .collect();
    Recipe { background, blobs }
}

fn render(spec: &SyntheticSpec, r: &Recipe, rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    let n = spec.image_size as f64;
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite noise");
    let blobs: Vec<Blob> = r
        .blobs
        .iter()
        .map(|b| Blob {
            cx: (b.cx + rng.random_range(-spec.jitter..=spec.jitter)) * n,
            cy: (b.cy + rng.random_range(-spec.jitter..=spec.jitter)) * n,
            scale: b.scale * rng.random_range(0.85..1.15) * n,
            color: b
                .color
                .iter()
                .map(|c| c * rng.random_range(0.9..1.1))
                .collect(),
        })
        .collect();
    for ch in 0..spec.channels {
        for y in 0..spec.image_size {
            for x in 0..spec.image_size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = r.background[ch];
                for b in &blobs {
                    let d2 = (px - b.cx).powi(2) + (py - b.cy).powi(2);
                    v += b.color[ch] * (-d2 / (2.0 * b.scale * b.scale)).exp();
                }
                let jitter = if spec.noise > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                out.push((v * 255.0 + jitter).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
}

/// Generates `per_class_count` images for every class, class-major.
/// Identical spec and split give identical bytes; splits draw independent
/// samples of the same class recipes.
pub fn generate_split(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let recipes: Vec<Recipe> = (0..spec.num_classes).map(|c| recipe(spec, c)).collect();
    let n = spec.num_classes * spec.per_class_count;
    let mut images = Vec::with_capacity(n * spec.channels * spec.image_size * spec.image_size);
    let mut labels = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(spec.seed, 0xDA7A), split.tag()));
    for (c, r) in recipes.iter().enumerate() {
        for _ in 0..spec.per_class_count {
            render(spec, r, &mut rng, &mut images);
            labels.push(c);
        }
    }
    Dataset::new(
        spec.channels,
        spec.image_size,
        spec.image_size,
        images,
        labels,
        spec.num_classes,
        Some(split),
    )
}

/// Training split of [`generate_split`].
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_split(spec, Split::Train)
}
