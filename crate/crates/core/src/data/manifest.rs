use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_cifar10_bin, load_idx, normalize, split, synth_blobs, Dataset, NormalizationStats, SplitSpec, SynthConfig};
use crate::error::{read_artifact, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    Idx { images: PathBuf, labels: PathBuf },
    Cifar10 { paths: Vec<PathBuf> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub total: usize,
    pub train: usize,
    pub val: usize,
    pub holdout: usize,
}

/// Everything needed to rebuild the normalized splits of a dataset.
///
/// `counts`, `checksums` and `normalization` are filled in by [`prepare`]; when present
/// in a manifest being loaded they are verified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub source: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<SplitCounts>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub checksums: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationStats>,
}

impl DatasetManifest {
    pub fn new(source: DataSource, split: SplitSpec) -> Self {
        DatasetManifest { source, split, counts: None, checksums: BTreeMap::new(), normalization: None }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Normalized splits plus the completed manifest.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub holdout: Dataset,
    pub stats: NormalizationStats,
    pub manifest: DatasetManifest,
}

impl PreparedData {
    pub fn split_by_name(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "holdout" => Ok(&self.holdout),
            other => Err(Error::invalid(format!("unknown split {other:?} (train, val, holdout)"))),
        }
    }
}

fn file_crc(path: &Path) -> Result<String> {
    Ok(format!("{:08x}", crc32fast::hash(&read_artifact(path)?)))
}

/// Loads the source, splits, normalizes with training statistics, and verifies or
/// records counts and checksums.
pub fn prepare(manifest: &DatasetManifest) -> Result<PreparedData> {
    let (raw, checksums) = match &manifest.source {
        DataSource::Synth(cfg) => {
            let ds = synth_blobs(cfg)?;
            let sums = BTreeMap::from([("synth".to_string(), format!("{:08x}", ds.checksum()))]);
            (ds, sums)
        }
        DataSource::Idx { images, labels } => {
            let sums = BTreeMap::from([
                (images.display().to_string(), file_crc(images)?),
                (labels.display().to_string(), file_crc(labels)?),
            ]);
            (load_idx(images, labels)?, sums)
        }
        DataSource::Cifar10 { paths } => {
            let sums = paths.iter().map(|p| Ok((p.display().to_string(), file_crc(p)?))).collect::<Result<_>>()?;
            (load_cifar10_bin(paths)?, sums)
        }
    };
    if !manifest.checksums.is_empty() && manifest.checksums != checksums {
        return Err(Error::format("dataset checksum mismatch against manifest"));
    }
    let (tr, va, ho) = split(&raw, &manifest.split)?;
    let counts = SplitCounts { total: raw.len(), train: tr.len(), val: va.len(), holdout: ho.len() };
    if manifest.counts.as_ref().is_some_and(|c| *c != counts) {
        return Err(Error::format("split counts differ from manifest"));
    }
    let (train, val, holdout, stats) = normalize(&tr, &va, &ho)?;
    let mut out = manifest.clone();
    out.counts = Some(counts);
    out.checksums = checksums;
    out.normalization = Some(stats.clone());
    Ok(PreparedData { train, val, holdout, stats, manifest: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_manifest() -> DatasetManifest {
        DatasetManifest::new(
            DataSource::Synth(SynthConfig { num_classes: 4, per_class: 10, image_shape: [3, 8, 8], ..Default::default() }),
            SplitSpec::default(),
        )
    }

    #[test]
    fn prepare_fills_and_verifies() {
        let p = prepare(&synth_manifest()).unwrap();
        let m = &p.manifest;
        assert_eq!(m.counts.as_ref().unwrap().total, 40);
        assert_eq!(p.train.len() + p.val.len() + p.holdout.len(), 40);
        let again = prepare(m).unwrap();
        assert_eq!(again.val, p.val);
        let mut tampered = m.clone();
        tampered.checksums.insert("synth".into(), "00000000".into());
        assert!(matches!(prepare(&tampered), Err(Error::Format(_))));
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let m = prepare(&synth_manifest()).unwrap().manifest;
        let text = serde_json::to_string(&m).unwrap();
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let bad = text.replacen("\"split\"", "\"bogus\":1,\"split\"", 1);
        assert!(serde_json::from_str::<DatasetManifest>(&bad).is_err());
    }

    #[test]
    fn idx_source_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = crate::data::idx::tests::fixture(10, &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        let m = DatasetManifest::new(
            DataSource::Idx { images: ip, labels: lp.clone() },
            SplitSpec { train: 0.6, val: 0.2, holdout: 0.2, seed: 1 },
        );
        let p = prepare(&m).unwrap();
        assert_eq!(p.manifest.checksums.len(), 2);
        std::fs::remove_file(&lp).unwrap();
        assert_eq!(prepare(&m).unwrap_err().exit_code(), 3);
    }
}
