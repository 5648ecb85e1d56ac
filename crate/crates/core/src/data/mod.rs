mod cifar;
mod idx;
mod manifest;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cifar::{load_cifar10_bin, parse_cifar10_bin, CIFAR_RECORD_LEN};
pub use idx::{load_idx, parse_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use manifest::{prepare, DataSource, DatasetManifest, PreparedData, SplitCounts};
pub use split::{normalize, split, NormalizationStats, SplitSpec};
pub use synth::{synth_blobs, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Stable index within the source dataset.
    pub id: usize,
    /// `[C, H, W]` image.
    pub image: Tensor,
    pub label: usize,
    /// Annotated object region, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<Rect>,
}

/// Axis-aligned pixel rectangle `[top, top + height) × [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn full(h: usize, w: usize) -> Self {
        Rect { top: 0, left: 0, height: h, width: w }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.top + self.height && j >= self.left && j < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.top + self.height <= h && self.left + self.width <= w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, image_shape: [usize; 3], num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.image.shape() != image_shape {
                return Err(Error::shape("dataset", format!("sample {} has shape {:?}", s.id, s.image.shape())));
            }
            if s.label >= num_classes {
                return Err(Error::invalid(format!("sample {} label {} >= {num_classes}", s.id, s.label)));
            }
        }
        Ok(Dataset { name: name.into(), image_shape, num_classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    pub fn get(&self, id: usize) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// The samples at the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Result<Dataset> {
        let samples = positions
            .iter()
            .map(|&i| self.samples.get(i).cloned().ok_or_else(|| Error::invalid(format!("position {i} out of range"))))
            .collect::<Result<_>>()?;
        Ok(Dataset { name: self.name.clone(), image_shape: self.image_shape, num_classes: self.num_classes, samples })
    }

    /// CRC-32 over labels and `f32` pixel values, used as a content checksum.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for s in &self.samples {
            h.update(&(s.id as u64).to_le_bytes());
            h.update(&(s.label as u64).to_le_bytes());
            for &v in s.image.data() {
                h.update(&(v as f32).to_le_bytes());
            }
        }
        h.finalize()
    }
}
