use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{read_artifact, Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(format!("{what}: truncated header")))
}

/// Parses an IDX image file and label file (MNIST layout). Pixels are scaled to [0, 1].
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("images: bad magic {magic:#010x}")));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(Error::format(format!("{n} images but {n_labels} labels")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::format("images: zero extent"));
    }
    let plane = rows * cols;
    let pixels = images.get(16..16 + n * plane).ok_or_else(|| Error::format("images: truncated data"))?;
    let label_bytes = labels.get(8..8 + n).ok_or_else(|| Error::format("labels: truncated data"))?;
    let num_classes = label_bytes.iter().copied().max().map_or(0, |m| m as usize + 1).max(2);
    let samples = (0..n)
        .map(|i| Sample {
            id: i,
            image: Tensor::from_parts(
                vec![1, rows, cols],
                pixels[i * plane..(i + 1) * plane].iter().map(|&b| b as f64 / 255.0).collect(),
            ),
            label: label_bytes[i] as usize,
            object: None,
        })
        .collect();
    Dataset::new("idx", [1, rows, cols], num_classes, samples)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    parse_idx(&read_artifact(images_path)?, &read_artifact(labels_path)?)
}
