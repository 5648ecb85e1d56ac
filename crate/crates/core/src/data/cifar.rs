use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{read_artifact, Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by 32×32 R, G and B planes.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary batches; sample ids run consecutively across `files`.
pub fn parse_cifar10_bin(files: &[&[u8]]) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (f, bytes) in files.iter().enumerate() {
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::format(format!(
                "file {f}: length {} is not a multiple of {CIFAR_RECORD_LEN}",
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::format(format!("file {f}: label byte {label} > 9")));
            }
            let image = Tensor::from_parts(vec![3, 32, 32], rec[1..].iter().map(|&b| b as f64 / 255.0).collect());
            samples.push(Sample { id: samples.len(), image, label, object: None });
        }
    }
    Dataset::new("cifar10", [3, 32, 32], 10, samples)
}

pub fn load_cifar10_bin(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let files = paths.iter().map(|p| read_artifact(p.as_ref())).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[u8]> = files.iter().map(Vec::as_slice).collect();
    parse_cifar10_bin(&refs)
}
