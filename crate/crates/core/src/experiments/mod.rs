mod finetune;
mod masking;
mod stats;
mod sweeps;

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Rect};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::saliency::{filter_profile_with_prediction, rank_descending, standardize, LossLabel, ProfileStats};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;
use crate::trainer::SelectionMode;

pub use finetune::{finetune_sweep, FinetuneReport, FinetuneRow, FinetuneSampleRecord, FinetuneSweepConfig, FULL_NETWORK};
pub use masking::{mask_dataset_experiment, MaskExperimentConfig, MaskReport, MaskSampleRecord, PairedComparison};
pub use stats::{bootstrap_ci, mean, sign_test};
pub use sweeps::{correct_pool_pruning, perturbation_sweep, pruning_sweep, PERTURB_NOISE_SEEDS};

/// Which samples of a split enter a pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Misclassified,
    Correct,
}

/// A sample with everything the sweeps need precomputed from the unmodified model.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub sample_id: usize,
    pub image: Tensor,
    pub label: usize,
    pub predicted: usize,
    pub confidences: Vec<f64>,
    /// Standardized profile with the true label.
    pub profile: Vec<f64>,
    pub object: Option<Rect>,
}

/// Samples of `dataset` that the model classifies according to `kind`, in dataset order,
/// truncated to `limit`.
pub fn build_pool(
    model: &Model,
    dataset: &Dataset,
    stats: &ProfileStats,
    kind: PoolKind,
    limit: Option<usize>,
) -> Result<Vec<PoolEntry>> {
    let preds = model.predict_many(&dataset.images(), 256)?;
    let chosen: Vec<usize> = (0..dataset.len())
        .filter(|&i| (preds[i].predicted == dataset.samples[i].label) == (kind == PoolKind::Correct))
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    chosen
        .par_iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let (raw, _) = filter_profile_with_prediction(model, &s.image, s.label, LossLabel::True)?;
            Ok(PoolEntry {
                sample_id: s.id,
                image: s.image.clone(),
                label: s.label,
                predicted: preds[i].predicted,
                confidences: preds[i].confidences.clone(),
                profile: standardize(&raw, stats)?,
                object: s.object,
            })
        })
        .collect()
}

/// Absolute filter counts for percentages of `total` (rounded, at least 1, deduplicated, ascending).
pub fn counts_from_percent(total: usize, percents: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> =
        percents.iter().map(|p| ((p / 100.0 * total as f64).round() as usize).clamp(1, total)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Seed of the `(sample, k)` random draw, independent of evaluation order.
pub(crate) fn selection_seed(master: u64, sample_id: usize, k: usize) -> u64 {
    derive_seed(derive_seed(master, sample_id as u64), k as u64)
}

/// The `k` filters chosen from a standardized profile. Most/least salient ties go to the
/// lowest id; random draws are uniform without replacement.
pub fn select_filters(profile: &[f64], mode: SelectionMode, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = profile.len();
    if k > n {
        return Err(Error::invalid(format!("cannot select {k} of {n} filters")));
    }
    Ok(match mode {
        SelectionMode::MostSalient => rank_descending(profile).into_iter().take(k).collect(),
        SelectionMode::LeastSalient => {
            let mut ids: Vec<usize> = (0..n).collect();
            ids.sort_by(|&a, &b| profile[a].total_cmp(&profile[b]).then(a.cmp(&b)));
            ids.truncate(k);
            ids
        }
        SelectionMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        }
    })
}

/// Shared sweep settings; counts are absolute filter numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub modes: Vec<SelectionMode>,
    pub counts: Vec<usize>,
    pub seed: u64,
    pub bootstrap_resamples: usize,
    pub confidence_level: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            modes: SelectionMode::ALL.to_vec(),
            counts: vec![1, 2, 5, 10],
            seed: 0,
            bootstrap_resamples: 1000,
            confidence_level: 0.95,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self, filter_count: usize) -> Result<()> {
        if self.modes.is_empty() || self.counts.is_empty() {
            return Err(Error::invalid("sweep needs at least one mode and one count"));
        }
        if self.counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sweep counts must be strictly ascending"));
        }
        if self.counts.last().is_some_and(|&k| k > filter_count) {
            return Err(Error::invalid(format!("count exceeds the {filter_count} filters")));
        }
        if self.bootstrap_resamples == 0 || !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(Error::invalid("bootstrap needs resamples > 0 and a level in (0, 1)"));
        }
        Ok(())
    }
}

/// Point estimate with its bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

impl Estimate {
    pub(crate) fn of(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Self> {
        let m = mean(values)?;
        let (low, high) = bootstrap_ci(values, resamples, level, seed)?;
        Ok(Estimate { mean: m, low: low.min(m), high: high.max(m) })
    }
}

/// Per-sample outcome of one intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub mode: SelectionMode,
    pub k: usize,
    /// Change in confidence of the class the unmodified model predicted.
    pub delta_predicted: f64,
    pub delta_true: f64,
    /// Fraction of intervention draws after which the sample is classified correctly.
    pub correct_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: SelectionMode,
    pub k: usize,
    pub samples: usize,
    pub delta_predicted: Estimate,
    pub delta_true: Estimate,
    pub correct_after: Estimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub pool: PoolKind,
    pub config: SweepConfig,
    pub rows: Vec<ReportRow>,
    pub records: Vec<SampleRecord>,
    /// Wall-clock time; excluded from the serialized (reproducible) report.
    #[serde(skip)]
    pub runtime: Duration,
}

impl ExperimentReport {
    pub fn row(&self, mode: SelectionMode, k: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.mode == mode && r.k == k)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "mode,k,samples,delta_predicted,delta_predicted_low,delta_predicted_high,\
             delta_true,delta_true_low,delta_true_high,correct_after,correct_after_low,correct_after_high"
        )?;
        for r in &self.rows {
            let e = |e: &Estimate| format!("{},{},{}", e.mean, e.low, e.high);
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.mode.as_str(),
                r.k,
                r.samples,
                e(&r.delta_predicted),
                e(&r.delta_true),
                e(&r.correct_after)
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

/// Aggregates records (already in canonical order) into one row per `(mode, k)`.
pub(crate) fn aggregate(records: &[SampleRecord], config: &SweepConfig) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (mi, &mode) in config.modes.iter().enumerate() {
        for (ki, &k) in config.counts.iter().enumerate() {
            let sel: Vec<&SampleRecord> = records.iter().filter(|r| r.mode == mode && r.k == k).collect();
            let col = |f: fn(&SampleRecord) -> f64| sel.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let seed = derive_seed(config.seed, (mi * config.counts.len() + ki) as u64);
            let est = |v: Vec<f64>, salt: u64| {
                Estimate::of(&v, config.bootstrap_resamples, config.confidence_level, derive_seed(seed, salt))
            };
            rows.push(ReportRow {
                mode,
                k,
                samples: sel.len(),
                delta_predicted: est(col(|r| r.delta_predicted), 0)?,
                delta_true: est(col(|r| r.delta_true), 1)?,
                correct_after: est(col(|r| r.correct_after), 2)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
