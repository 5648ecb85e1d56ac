use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{read_artifact, Error, Result};
use crate::nn::Model;
use crate::saliency::{filter_profiles, load_profiles, save_profiles, standardize, ProfileRecord, ProfileStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub sample_id: usize,
    pub label: usize,
    pub predicted: usize,
}

impl RowMeta {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }

    /// Unordered {true, predicted} pair.
    pub fn confusion_pair(&self) -> (usize, usize) {
        (self.label.min(self.predicted), self.label.max(self.predicted))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    All,
    MisclassifiedOnly,
    CorrectOnly,
}

impl Pool {
    fn admits(self, m: &RowMeta) -> bool {
        match self {
            Pool::All => true,
            Pool::MisclassifiedOnly => !m.correct(),
            Pool::CorrectOnly => m.correct(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QueryTarget {
    /// A stored sample; it is excluded from its own results.
    Sample(usize),
    Profile(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborQuery {
    pub target: QueryTarget,
    pub k: usize,
    /// Inclusive `[first_layer, last_layer]` restriction of the compared coordinates.
    pub layer_range: Option<(usize, usize)>,
    pub pool: Pool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub sample_id: usize,
    pub similarity: f64,
    pub label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborResult {
    pub neighbors: Vec<Neighbor>,
    /// `k` exceeded the pool size, so the whole pool was returned.
    pub truncated: bool,
    /// The query profile (restricted to the layer range) had zero norm.
    pub zero_norm_query: bool,
}

/// Exact cosine-similarity search over standardized profiles.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileIndex {
    width: usize,
    rows: Vec<f64>,
    meta: Vec<RowMeta>,
    layer_boundaries: Vec<Range<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    width: usize,
    rows: usize,
    layer_boundaries: Vec<Range<usize>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

impl ProfileIndex {
    pub fn build(profiles: Vec<(RowMeta, Vec<f64>)>, layer_boundaries: Vec<Range<usize>>) -> Result<Self> {
        let width = layer_boundaries.last().map_or(0, |r| r.end);
        if width == 0 {
            return Err(Error::invalid("index needs a non-empty layer table"));
        }
        let mut expected = 0;
        for r in &layer_boundaries {
            if r.start != expected || r.end <= r.start {
                return Err(Error::invalid("layer boundaries must tile the profile"));
            }
            expected = r.end;
        }
        let mut rows = Vec::with_capacity(profiles.len() * width);
        let mut meta = Vec::with_capacity(profiles.len());
        for (m, p) in profiles {
            if p.len() != width {
                return Err(Error::shape("profile index", format!("row {} has length {}", m.sample_id, p.len())));
            }
            if meta.iter().any(|o: &RowMeta| o.sample_id == m.sample_id) {
                return Err(Error::invalid(format!("duplicate sample id {}", m.sample_id)));
            }
            rows.extend(p);
            meta.push(m);
        }
        Ok(ProfileIndex { width, rows, meta, layer_boundaries })
    }

    /// Standardized true-label profiles of the samples of `dataset` admitted by `pool`.
    pub fn from_dataset(model: &Model, dataset: &Dataset, stats: &ProfileStats, pool: Pool) -> Result<Self> {
        let pairs: Vec<_> = dataset.samples.iter().map(|s| (&s.image, s.label)).collect();
        let raw = filter_profiles(model, &pairs)?;
        let mut rows = Vec::new();
        for (s, (profile, predicted)) in dataset.samples.iter().zip(raw) {
            let meta = RowMeta { sample_id: s.id, label: s.label, predicted };
            if pool.admits(&meta) {
                rows.push((meta, standardize(&profile, stats)?));
            }
        }
        if rows.is_empty() {
            return Err(Error::Empty(format!("no {pool:?} samples in {}", dataset.name)));
        }
        Self::build(rows, model.registry().layer_boundaries())
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn layer_boundaries(&self) -> &[Range<usize>] {
        &self.layer_boundaries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }

    pub fn position(&self, sample_id: usize) -> Option<usize> {
        self.meta.iter().position(|m| m.sample_id == sample_id)
    }

    pub fn profile_of(&self, sample_id: usize) -> Option<&[f64]> {
        self.position(sample_id).map(|i| self.row(i))
    }

    /// Coordinate range covered by an inclusive layer range.
    pub fn coordinates(&self, layer_range: Option<(usize, usize)>) -> Result<Range<usize>> {
        match layer_range {
            None => Ok(0..self.width),
            Some((a, b)) if a <= b && b < self.layer_boundaries.len() => {
                Ok(self.layer_boundaries[a].start..self.layer_boundaries[b].end)
            }
            Some((a, b)) => Err(Error::invalid(format!(
                "layer range {a}..={b} outside 0..{}",
                self.layer_boundaries.len()
            ))),
        }
    }

    pub fn knn(&self, query: &NeighborQuery) -> Result<NeighborResult> {
        if query.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let coords = self.coordinates(query.layer_range)?;
        let (q, exclude): (&[f64], Option<usize>) = match &query.target {
            QueryTarget::Sample(id) => {
                let pos = self.position(*id).ok_or_else(|| Error::invalid(format!("sample {id} not in index")))?;
                (self.row(pos), Some(pos))
            }
            QueryTarget::Profile(p) => {
                if p.len() != self.width {
                    return Err(Error::shape("knn", format!("query length {} vs {}", p.len(), self.width)));
                }
                (p.as_slice(), None)
            }
        };
        let qs = &q[coords.clone()];
        let zero_norm_query = qs.iter().all(|&v| v == 0.0);
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| Some(i) != exclude && query.pool.admits(&self.meta[i]))
            .map(|i| (cosine(qs, &self.row(i)[coords.clone()]), i))
            .collect();
        if scored.is_empty() {
            return Err(Error::Empty("neighbor pool after filtering".into()));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(self.meta[a.1].sample_id.cmp(&self.meta[b.1].sample_id)));
        let truncated = query.k > scored.len();
        scored.truncate(query.k);
        let neighbors = scored
            .into_iter()
            .map(|(similarity, i)| {
                let m = self.meta[i];
                Neighbor { sample_id: m.sample_id, similarity, label: m.label, predicted: m.predicted }
            })
            .collect();
        Ok(NeighborResult { neighbors, truncated, zero_norm_query })
    }

    fn neighbor_ids(&self, sample_id: usize, k: usize, pool: Pool) -> Result<Vec<usize>> {
        let q = NeighborQuery { target: QueryTarget::Sample(sample_id), k, layer_range: None, pool };
        Ok(self.knn(&q)?.neighbors.into_iter().map(|n| self.position(n.sample_id).expect("indexed")).collect())
    }

    fn pair_fraction(&self, query_pos: usize, neighbors: &[usize]) -> f64 {
        let pair = self.meta[query_pos].confusion_pair();
        let hits = neighbors.iter().filter(|&&i| !self.meta[i].correct() && self.meta[i].confusion_pair() == pair).count();
        hits as f64 / neighbors.len().max(1) as f64
    }

    /// Fraction of the `k` nearest neighbors (within `pool`) that share the sample's unordered
    /// {true, predicted} pair.
    pub fn neighbor_confusion_stats(&self, sample_id: usize, k: usize, pool: Pool) -> Result<f64> {
        let pos = self.position(sample_id).ok_or_else(|| Error::invalid(format!("sample {sample_id} not in index")))?;
        if self.meta[pos].correct() {
            return Err(Error::invalid(format!("sample {sample_id} is correctly classified")));
        }
        let nb = self.neighbor_ids(sample_id, k, pool)?;
        Ok(self.pair_fraction(pos, &nb))
    }

    /// Mean fraction of correctly classified samples among the `k` nearest neighbors of
    /// each member of a group (`correct` or misclassified), searching the whole index.
    pub fn neighbor_correctness_rate(&self, correct_group: bool, k: usize) -> Result<f64> {
        let members: Vec<usize> = (0..self.len()).filter(|&i| self.meta[i].correct() == correct_group).collect();
        if members.is_empty() {
            return Err(Error::Empty("correctness group".into()));
        }
        let mut total = 0.0;
        for &i in &members {
            let nb = self.neighbor_ids(self.meta[i].sample_id, k, Pool::All)?;
            total += nb.iter().filter(|&&j| self.meta[j].correct()).count() as f64 / nb.len() as f64;
        }
        Ok(total / members.len() as f64)
    }

    /// Mean confusion-pair sharing over every misclassified sample, compared with the same
    /// statistic after randomly reassigning neighbor lists across samples.
    pub fn confusion_permutation_test(&self, k: usize, pool: Pool, permutations: usize, seed: u64) -> Result<PermutationTest> {
        let queries: Vec<usize> = (0..self.len()).filter(|&i| !self.meta[i].correct()).collect();
        if queries.len() < 2 {
            return Err(Error::Empty("fewer than two misclassified samples".into()));
        }
        let lists: Vec<Vec<usize>> =
            queries.iter().map(|&i| self.neighbor_ids(self.meta[i].sample_id, k, pool)).collect::<Result<_>>()?;
        let stat = |assign: &[usize]| {
            queries.iter().zip(assign).map(|(&q, &l)| self.pair_fraction(q, &lists[l])).sum::<f64>() / queries.len() as f64
        };
        let identity: Vec<usize> = (0..queries.len()).collect();
        let observed = stat(&identity);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm = identity.clone();
        let mut baseline = Vec::with_capacity(permutations);
        for _ in 0..permutations {
            perm.shuffle(&mut rng);
            baseline.push(stat(&perm));
        }
        let at_least = baseline.iter().filter(|&&b| b >= observed).count();
        Ok(PermutationTest {
            observed,
            baseline_mean: baseline.iter().sum::<f64>() / permutations.max(1) as f64,
            p_value: (1 + at_least) as f64 / (1 + permutations) as f64,
            permutations,
            samples: queries.len(),
        })
    }

    /// Writes the rows in the profile blob format plus a JSON sidecar with the layer table.
    pub fn save(&self, manifest: &Path, stats_id: Option<&str>) -> Result<()> {
        let entries: Vec<(ProfileRecord, Vec<f64>)> = (0..self.len())
            .map(|i| {
                let m = self.meta[i];
                let rec = ProfileRecord {
                    sample_id: m.sample_id,
                    label: m.label,
                    predicted: m.predicted,
                    standardized: true,
                    stats_id: stats_id.map(str::to_string),
                    offset: 0,
                    len: 0,
                };
                (rec, self.row(i).to_vec())
            })
            .collect();
        save_profiles(manifest, &entries)?;
        let side = Sidecar { width: self.width, rows: self.len(), layer_boundaries: self.layer_boundaries.clone() };
        std::fs::write(sidecar_path(manifest), serde_json::to_vec_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_slice(&read_artifact(&sidecar_path(manifest))?)
            .map_err(|e| Error::format(format!("index sidecar: {e}")))?;
        let rows = load_profiles(manifest)?;
        if rows.len() != side.rows {
            return Err(Error::format("index row count differs from sidecar"));
        }
        let profiles = rows
            .into_iter()
            .map(|(r, v)| (RowMeta { sample_id: r.sample_id, label: r.label, predicted: r.predicted }, v))
            .collect();
        let idx = Self::build(profiles, side.layer_boundaries)?;
        if idx.width != side.width {
            return Err(Error::format("index width differs from sidecar"));
        }
        Ok(idx)
    }
}

pub fn sidecar_path(manifest: &Path) -> std::path::PathBuf {
    manifest.with_extension("index.json")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub observed: f64,
    pub baseline_mean: f64,
    /// `(1 + #{baseline ≥ observed}) / (1 + permutations)`.
    pub p_value: f64,
    pub permutations: usize,
    pub samples: usize,
}
