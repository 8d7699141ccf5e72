//! Synthetic image classes and the `IPDS` dataset format.

mod format;
mod synthetic;

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use format::{from_bytes, load, save, to_bytes, CRC_LEN, HEADER_LEN};
pub use synthetic::{generate, generate_split, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

impl Split {
    pub(crate) fn tag(self) -> u64 {
        match self {
            Split::Pretrain => 1,
            Split::Train => 2,
            Split::Test => 3,
        }
    }
}

/// Labelled `u8` images, `[N × C × H × W]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    images: Vec<u8>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    split: Option<Split>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        images: Vec<u8>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Option<Split>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::dim(format!(
                "{} pixel bytes for {} images of {channels}×{height}×{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::dim(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            images,
            labels,
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split(&self) -> Option<Split> {
        self.split
    }

    pub fn pixels(&self) -> &[u8] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples whose label is in `classes`, in original order and with
    /// original label ids.
    pub fn subset_by_classes(&self, classes: &[usize]) -> Result<Dataset> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.num_classes()) {
            return Err(Error::Usage(format!("unknown class id {c}")));
        }
        let keep: BTreeSet<usize> = classes.iter().copied().collect();
        let n = self.image_len();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if keep.contains(&l) {
                images.extend_from_slice(&self.images[i * n..(i + 1) * n]);
                labels.push(l);
            }
        }
        let mut d = Dataset::new(
            self.channels,
            self.height,
            self.width,
            images,
            labels,
            self.num_classes(),
            self.split,
        )?;
        d.class_names = self.class_names.clone();
        Ok(d)
    }

    /// Images at `indices` scaled to `[-1, 1]`, as `[batch × C × H × W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!("sample {i} out of range")));
            }
            data.extend(self.image(i).iter().map(|&p| normalize(p)));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(
            &[indices.len(), self.channels, self.height, self.width],
            data,
        )?;
        Ok((t, labels))
    }
}

/// `(x/255 − 0.5)·2`
pub fn normalize(p: u8) -> f64 {
    (p as f64 / 255.0 - 0.5) * 2.0
}
