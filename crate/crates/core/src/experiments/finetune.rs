use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{select_filters, selection_seed, Estimate, PoolEntry};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::profile_index::{NeighborQuery, Pool, ProfileIndex, QueryTarget};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;
use crate::trainer::{full_network_finetune, targeted_finetune, FinetuneOutcome, FinetuneStep, SelectionMode};

/// Mode label of the every-parameter baseline.
pub const FULL_NETWORK: &str = "full_network";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSweepConfig {
    pub modes: Vec<SelectionMode>,
    /// Tunable-filter counts, strictly ascending.
    pub counts: Vec<usize>,
    /// L2 norm of the single update.
    pub step_size: f64,
    pub neighbors: usize,
    /// Permits counts above the default fine-tuning cap.
    pub allow_over_cap: bool,
    pub seed: u64,
    pub bootstrap_resamples: usize,
    pub confidence_level: f64,
}

impl Default for FinetuneSweepConfig {
    fn default() -> Self {
        FinetuneSweepConfig {
            modes: SelectionMode::ALL.to_vec(),
            counts: vec![1],
            step_size: 1e-3,
            neighbors: 10,
            allow_over_cap: false,
            seed: 0,
            bootstrap_resamples: 1000,
            confidence_level: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSampleRecord {
    pub sample_id: usize,
    pub mode: String,
    pub k: usize,
    pub self_corrected: bool,
    pub zero_gradient: bool,
    pub neighbor_ids: Vec<usize>,
    /// Fraction of the neighbors classified correctly after the update.
    pub neighbor_corrected: f64,
    /// Mean change in the neighbors' true-class confidence.
    pub neighbor_delta_true: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub mode: String,
    pub k: usize,
    pub samples: usize,
    pub self_corrected: Estimate,
    pub neighbor_corrected: Estimate,
    pub neighbor_delta_true: Estimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub config: FinetuneSweepConfig,
    pub rows: Vec<FinetuneRow>,
    pub records: Vec<FinetuneSampleRecord>,
    #[serde(skip)]
    pub runtime: Duration,
}

impl FinetuneReport {
    pub fn row(&self, mode: &str, k: usize) -> Option<&FinetuneRow> {
        self.rows.iter().find(|r| r.mode == mode && r.k == k)
    }

    /// The full-network baseline row.
    pub fn baseline(&self) -> Option<&FinetuneRow> {
        self.rows.iter().find(|r| r.mode == FULL_NETWORK)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "mode,k,samples,self_corrected,self_corrected_low,self_corrected_high,\
             neighbor_corrected,neighbor_corrected_low,neighbor_corrected_high,\
             neighbor_delta_true,neighbor_delta_true_low,neighbor_delta_true_high"
        )?;
        for r in &self.rows {
            let e = |e: &Estimate| format!("{},{},{}", e.mean, e.low, e.high);
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.mode,
                r.k,
                r.samples,
                e(&r.self_corrected),
                e(&r.neighbor_corrected),
                e(&r.neighbor_delta_true)
            )?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

struct NeighborSet<'a> {
    ids: Vec<usize>,
    images: Vec<&'a Tensor>,
    labels: Vec<usize>,
    true_conf: Vec<f64>,
}

fn neighbor_effect(model: &Model, n: &NeighborSet) -> Result<(f64, f64)> {
    let preds = model.predict_batch(&n.images)?;
    let len = preds.len() as f64;
    let corrected = preds.iter().zip(&n.labels).filter(|(p, &y)| p.predicted == y).count() as f64 / len;
    let delta = preds.iter().zip(&n.labels).zip(&n.true_conf).map(|((p, &y), c)| p.confidences[y] - c).sum::<f64>() / len;
    Ok((corrected, delta))
}

/// One normalized fine-tuning step per sample and selection, with self-correction and the
/// effect on the sample's nearest misclassified neighbors in `neighbor_index` (whose images
/// come from `neighbor_data`). A full-network step of the same size is the reference.
pub fn finetune_sweep(
    model: &Model,
    pool: &[PoolEntry],
    neighbor_index: &ProfileIndex,
    neighbor_data: &Dataset,
    config: &FinetuneSweepConfig,
) -> Result<FinetuneReport> {
    let start = Instant::now();
    if pool.is_empty() {
        return Err(Error::Empty("fine-tuning sample pool".into()));
    }
    if config.counts.is_empty() || config.counts.windows(2).any(|w| w[0] >= w[1]) || config.neighbors == 0 {
        return Err(Error::invalid("fine-tune sweep needs ascending counts and at least one neighbor"));
    }
    let total = model.registry().filter_count();
    let per_sample: Vec<Vec<FinetuneSampleRecord>> = pool
        .par_iter()
        .map(|entry| {
            let query = NeighborQuery {
                target: QueryTarget::Profile(entry.profile.clone()),
                k: config.neighbors,
                layer_range: None,
                pool: Pool::MisclassifiedOnly,
            };
            let found = neighbor_index.knn(&query)?.neighbors;
            let mut set = NeighborSet { ids: Vec::new(), images: Vec::new(), labels: Vec::new(), true_conf: Vec::new() };
            for n in &found {
                let s = neighbor_data
                    .get(n.sample_id)
                    .ok_or_else(|| Error::invalid(format!("neighbor {} missing from the dataset", n.sample_id)))?;
                set.ids.push(n.sample_id);
                set.images.push(&s.image);
                set.labels.push(s.label);
            }
            set.true_conf =
                model.predict_batch(&set.images)?.iter().zip(&set.labels).map(|(p, &y)| p.confidences[y]).collect();
            let record = |mode: &str, k: usize, o: &FinetuneOutcome| -> Result<FinetuneSampleRecord> {
                let (neighbor_corrected, neighbor_delta_true) = neighbor_effect(&o.model, &set)?;
                Ok(FinetuneSampleRecord {
                    sample_id: entry.sample_id,
                    mode: mode.to_string(),
                    k,
                    self_corrected: o.corrected,
                    zero_gradient: o.zero_gradient,
                    neighbor_ids: set.ids.clone(),
                    neighbor_corrected,
                    neighbor_delta_true,
                })
            };
            let mut out = Vec::new();
            for &mode in &config.modes {
                for &k in &config.counts {
                    let filter_ids = select_filters(&entry.profile, mode, k, selection_seed(config.seed, entry.sample_id, k))?;
                    let step = FinetuneStep {
                        filter_ids,
                        step_size: config.step_size,
                        mode,
                        allow_over_cap: config.allow_over_cap,
                    };
                    let o = targeted_finetune(model, &entry.image, entry.label, &step)?;
                    out.push(record(mode.as_str(), k, &o)?);
                }
            }
            let o = full_network_finetune(model, &entry.image, entry.label, config.step_size)?;
            out.push(record(FULL_NETWORK, total, &o)?);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let records: Vec<FinetuneSampleRecord> = per_sample.into_iter().flatten().collect();

    let mut groups: BTreeMap<(usize, usize), (String, usize)> = BTreeMap::new();
    for (mi, &mode) in config.modes.iter().enumerate() {
        for (ki, &k) in config.counts.iter().enumerate() {
            groups.insert((mi, ki), (mode.as_str().to_string(), k));
        }
    }
    groups.insert((config.modes.len(), 0), (FULL_NETWORK.to_string(), total));
    let mut rows = Vec::new();
    for ((mi, ki), (mode, k)) in groups {
        let sel: Vec<&FinetuneSampleRecord> = records.iter().filter(|r| r.mode == mode && r.k == k).collect();
        let seed = derive_seed(config.seed, (mi * config.counts.len() + ki) as u64);
        let est = |v: Vec<f64>, salt: u64| {
            Estimate::of(&v, config.bootstrap_resamples, config.confidence_level, derive_seed(seed, salt))
        };
        rows.push(FinetuneRow {
            samples: sel.len(),
            self_corrected: est(sel.iter().map(|r| if r.self_corrected { 1.0 } else { 0.0 }).collect(), 0)?,
            neighbor_corrected: est(sel.iter().map(|r| r.neighbor_corrected).collect(), 1)?,
            neighbor_delta_true: est(sel.iter().map(|r| r.neighbor_delta_true).collect(), 2)?,
            mode,
            k,
        });
    }
    Ok(FinetuneReport { config: config.clone(), rows, records, runtime: start.elapsed() })
}
