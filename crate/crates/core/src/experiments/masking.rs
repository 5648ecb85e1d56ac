use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean, sign_test, PoolEntry};
use crate::error::{Error, Result};
use crate::input_saliency::{
    filter_saliency_delta, input_saliency_map, mask_top_percent, random_control_mask, BoostSpec, MaskFill,
};
use crate::nn::Model;
use crate::saliency::ProfileStats;
use crate::seeds::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskExperimentConfig {
    /// Share of eligible pixels masked, in percent; 0 masks nothing.
    pub percent: f64,
    pub boost: BoostSpec,
    /// Never mask the sample's annotated object region.
    pub protect_objects: bool,
    pub fill: MaskFill,
    pub seed: u64,
}

impl Default for MaskExperimentConfig {
    fn default() -> Self {
        MaskExperimentConfig {
            percent: 5.0,
            boost: BoostSpec::default(),
            protect_objects: true,
            fill: MaskFill::DatasetMean,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSampleRecord {
    pub sample_id: usize,
    pub masked_pixels: usize,
    pub filters: Vec<usize>,
    pub delta_incorrect_salient: f64,
    pub delta_incorrect_random: f64,
    pub delta_true_salient: f64,
    pub delta_true_random: f64,
    /// Mean standardized saliency of the boosted filters on the original image.
    pub filter_saliency_original: f64,
    pub filter_saliency_salient: f64,
    pub filter_saliency_random: f64,
}

/// Sign test of paired differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub mean_difference: f64,
    pub p_value: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl PairedComparison {
    fn of(differences: &[f64]) -> Result<Self> {
        let (p_value, positives, negatives) = sign_test(differences)?;
        Ok(PairedComparison { mean_difference: mean(differences)?, p_value, positives, negatives })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskReport {
    pub config: MaskExperimentConfig,
    pub samples: usize,
    /// Salient-masking change in incorrect-class confidence against zero.
    pub incorrect_salient: PairedComparison,
    pub incorrect_random: PairedComparison,
    pub true_salient: PairedComparison,
    pub true_random: PairedComparison,
    /// Salient minus random change in incorrect-class confidence.
    pub incorrect_salient_vs_random: PairedComparison,
    pub true_salient_vs_random: PairedComparison,
    /// Salient minus random mean saliency of the boosted filters.
    pub filter_saliency_salient_vs_random: PairedComparison,
    pub records: Vec<MaskSampleRecord>,
    #[serde(skip)]
    pub runtime: Duration,
}

impl MaskReport {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "comparison,mean_difference,p_value,positives,negatives")?;
        for (name, c) in [
            ("incorrect_salient", &self.incorrect_salient),
            ("incorrect_random", &self.incorrect_random),
            ("true_salient", &self.true_salient),
            ("true_random", &self.true_random),
            ("incorrect_salient_vs_random", &self.incorrect_salient_vs_random),
            ("true_salient_vs_random", &self.true_salient_vs_random),
            ("filter_saliency_salient_vs_random", &self.filter_saliency_salient_vs_random),
        ] {
            writeln!(f, "{name},{},{},{},{}", c.mean_difference, c.p_value, c.positives, c.negatives)?;
        }
        f.flush()?;
        Ok(())
    }
}

fn one_sample(model: &Model, entry: &PoolEntry, stats: &ProfileStats, cfg: &MaskExperimentConfig) -> Result<MaskSampleRecord> {
    let map = input_saliency_map(model, &entry.image, entry.label, stats, &cfg.boost)?;
    let protect = if cfg.protect_objects { entry.object.as_ref() } else { None };
    let (salient, random, masked_pixels) = if cfg.percent == 0.0 {
        (entry.image.clone(), entry.image.clone(), 0)
    } else {
        let s = mask_top_percent(&entry.image, &map, cfg.percent, protect, cfg.fill)?;
        let r = random_control_mask(&entry.image, s.masked, protect, cfg.fill, derive_seed(cfg.seed, entry.sample_id as u64))?;
        (s.image, r.image, s.masked)
    };
    let preds = model.predict_batch(&[&salient, &random])?;
    let (y, wrong) = (entry.label, entry.predicted);
    let (base, variants) =
        filter_saliency_delta(model, &entry.image, &[salient.clone(), random.clone()], y, &map.filters, stats)?;
    Ok(MaskSampleRecord {
        sample_id: entry.sample_id,
        masked_pixels,
        filters: map.filters,
        delta_incorrect_salient: preds[0].confidences[wrong] - entry.confidences[wrong],
        delta_incorrect_random: preds[1].confidences[wrong] - entry.confidences[wrong],
        delta_true_salient: preds[0].confidences[y] - entry.confidences[y],
        delta_true_random: preds[1].confidences[y] - entry.confidences[y],
        filter_saliency_original: base.mean,
        filter_saliency_salient: variants[0].mean,
        filter_saliency_random: variants[1].mean,
    })
}

/// Masks the top-`percent` input-saliency pixels of each misclassified sample and an
/// equal number of random pixels, and compares the confidence changes with sign tests.
pub fn mask_dataset_experiment(
    model: &Model,
    pool: &[PoolEntry],
    stats: &ProfileStats,
    config: &MaskExperimentConfig,
) -> Result<MaskReport> {
    let start = Instant::now();
    if pool.is_empty() {
        return Err(Error::Empty("masking sample pool".into()));
    }
    if pool.iter().any(|e| e.predicted == e.label) {
        return Err(Error::invalid("masking experiment expects misclassified samples"));
    }
    if !(0.0..100.0).contains(&config.percent) {
        return Err(Error::invalid(format!("percent must lie in [0, 100), got {}", config.percent)));
    }
    let records: Vec<MaskSampleRecord> =
        pool.par_iter().map(|e| one_sample(model, e, stats, config)).collect::<Result<_>>()?;
    let col = |f: fn(&MaskSampleRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    Ok(MaskReport {
        config: config.clone(),
        samples: records.len(),
        incorrect_salient: PairedComparison::of(&col(|r| r.delta_incorrect_salient))?,
        incorrect_random: PairedComparison::of(&col(|r| r.delta_incorrect_random))?,
        true_salient: PairedComparison::of(&col(|r| r.delta_true_salient))?,
        true_random: PairedComparison::of(&col(|r| r.delta_true_random))?,
        incorrect_salient_vs_random: PairedComparison::of(&col(|r| r.delta_incorrect_salient - r.delta_incorrect_random))?,
        true_salient_vs_random: PairedComparison::of(&col(|r| r.delta_true_salient - r.delta_true_random))?,
        filter_saliency_salient_vs_random: PairedComparison::of(&col(|r| {
            r.filter_saliency_salient - r.filter_saliency_random
        }))?,
        records,
        runtime: start.elapsed(),
    })
}
