use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::spec::ModelSpec;
use crate::error::{read_artifact, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSAL";
pub const VERSION: u8 = 1;

const GOLDEN_INPUT: &str = "golden.input";
const GOLDEN_CONFIDENCES: &str = "golden.confidences";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_accuracy: f64,
}

/// A stored input and the confidences the model produced for it when saved.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldenVector {
    pub input: Tensor,
    pub confidences: Vec<f64>,
}

impl GoldenVector {
    /// Records the model's current prediction for `input`.
    pub fn capture(model: &Model, input: &Tensor) -> Result<Self> {
        let input = input.map(super::model::to_storage);
        let confidences = model.predict(&input)?.confidences;
        Ok(GoldenVector { input, confidences })
    }

    /// Largest absolute difference between the stored and the current confidences.
    pub fn max_deviation(&self, model: &Model) -> Result<f64> {
        let now = model.predict(&self.input)?.confidences;
        Ok(now.iter().zip(&self.confidences).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainingMeta,
    pub golden: Option<GoldenVector>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDescriptor {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<TensorDescriptor>,
    meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(model: Model, meta: TrainingMeta) -> Self {
        Checkpoint { model, meta, golden: None }
    }

    /// Serializes to the `PSAL` binary layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let golden_conf = self.golden.as_ref().map(|g| Tensor::from_vec(g.confidences.clone()));
        let mut tensors: Vec<(&str, &Tensor)> =
            self.model.params().iter().map(|p| (p.name.as_str(), &*p.value)).collect();
        if let (Some(g), Some(c)) = (&self.golden, &golden_conf) {
            tensors.push((GOLDEN_INPUT, &g.input));
            tensors.push((GOLDEN_CONFIDENCES, c));
        }
        let mut descriptors = Vec::with_capacity(tensors.len());
        let mut blob = Vec::new();
        for (name, t) in &tensors {
            descriptors.push(TensorDescriptor { name: name.to_string(), shape: t.shape().to_vec(), offset: blob.len() });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = Header { spec: self.model.spec().clone(), tensors: descriptors, meta: self.meta.clone() };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(9 + header.len() + blob.len() + 4);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        out.extend_from_slice(&crc32fast::hash(&blob).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {}", bytes[4])));
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let blob_start = 9usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[9..blob_start])
            .map_err(|e| Error::format(format!("corrupt header: {e}")))?;
        if bytes.len() < blob_start + 4 {
            return Err(Error::format("truncated blob"));
        }
        let blob = &bytes[blob_start..bytes.len() - 4];
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let mut named = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0usize;
        for d in &header.tensors {
            let n: usize = d.shape.iter().product();
            if d.offset != expected_offset || d.offset + 4 * n > blob.len() {
                return Err(Error::format(format!("truncated or misplaced tensor {}", d.name)));
            }
            let data = blob[d.offset..d.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            named.push((d.name.clone(), Tensor::new(d.shape.clone(), data).map_err(|e| Error::format(e.to_string()))?));
            expected_offset += 4 * n;
        }
        if expected_offset != blob.len() {
            return Err(Error::format("blob length does not match tensor descriptors"));
        }
        if crc32fast::hash(blob) != crc {
            return Err(Error::format("checksum mismatch"));
        }
        let mut golden = None;
        if named.last().is_some_and(|(n, _)| n == GOLDEN_CONFIDENCES) {
            let (_, conf) = named.pop().expect("checked");
            match named.pop() {
                Some((n, input)) if n == GOLDEN_INPUT => {
                    golden = Some(GoldenVector { input, confidences: conf.into_data() })
                }
                _ => return Err(Error::format("golden confidences without golden input")),
            }
        }
        let model = Model::from_tensors(&header.spec, named)?;
        Ok(Checkpoint { model, meta: header.meta, golden })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_artifact(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let spec = ModelSpec::small_resnet(&[4, 8], 1, [3, 8, 8], 4);
        let model = Model::build(&spec, 7).unwrap();
        let input = Tensor::new(vec![3, 8, 8], (0..192).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let golden = GoldenVector::capture(&model, &input).unwrap();
        Checkpoint { model, meta: TrainingMeta { seed: 7, epochs: 3, final_accuracy: 0.5 }, golden: Some(golden) }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn golden_vector_reproduces() {
        let ck = sample_checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let g = back.golden.as_ref().unwrap();
        assert!(g.max_deviation(&back.model).unwrap() < 1e-6);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.psal");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        Checkpoint::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = Checkpoint::load(Path::new("/nonexistent/x.psal")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[12] ^= 0x20;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10]).is_err());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[9..9 + header_len]).unwrap();
        let edited = header.replacen("\"num_classes\":4", "\"num_classes\":5", 1);
        assert_ne!(edited, header);
        let mut out = bytes[..5].to_vec();
        out.extend_from_slice(&(edited.len() as u32).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[9 + header_len..]);
        assert!(matches!(Checkpoint::from_bytes(&out), Err(Error::Format(_))));
    }
}
