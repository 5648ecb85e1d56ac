use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{read_artifact, Error, Result};

/// Metadata line of a stored profile. `offset` and `len` locate its values (in `f32`
/// elements) within the companion blob file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRecord {
    pub sample_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub standardized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_id: Option<String>,
    #[serde(default)]
    pub offset: usize,
    #[serde(default)]
    pub len: usize,
}

impl ProfileRecord {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

/// Blob path paired with a `.jsonl` manifest.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("f32")
}

/// Writes a JSONL manifest (one record per line) and a little-endian `f32` blob with
/// the concatenated values.
pub fn save_profiles(manifest: &Path, entries: &[(ProfileRecord, Vec<f64>)]) -> Result<()> {
    let mut lines = std::io::BufWriter::new(std::fs::File::create(manifest)?);
    let mut blob = Vec::new();
    let mut offset = 0;
    for (rec, values) in entries {
        let mut rec = rec.clone();
        rec.offset = offset;
        rec.len = values.len();
        offset += values.len();
        serde_json::to_writer(&mut lines, &rec)?;
        lines.write_all(b"\n")?;
        for &v in values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    lines.flush()?;
    std::fs::write(blob_path(manifest), blob)?;
    Ok(())
}

pub fn load_profiles(manifest: &Path) -> Result<Vec<(ProfileRecord, Vec<f64>)>> {
    let text = read_artifact(manifest)?;
    let blob = read_artifact(&blob_path(manifest))?;
    if blob.len() % 4 != 0 {
        return Err(Error::format("profile blob length is not a multiple of 4"));
    }
    let values: Vec<f64> =
        blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProfileRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("manifest line {}: {e}", n + 1)))?;
        let end = rec.offset.checked_add(rec.len).filter(|&e| e <= values.len());
        let end = end.ok_or_else(|| Error::format(format!("record {} points past the blob", rec.sample_id)))?;
        let v = values[rec.offset..end].to_vec();
        out.push((rec, v));
    }
    Ok(out)
}
