use std::time::Instant;

use rayon::prelude::*;

use super::{aggregate, select_filters, selection_seed, ExperimentReport, PoolEntry, PoolKind, SampleRecord, SweepConfig};
use crate::error::{Error, Result};
use crate::nn::{perturb_filters, prune_filters, Model};
use crate::seeds::derive_seed;

/// Noise draws averaged per sample in perturbation sweeps.
pub const PERTURB_NOISE_SEEDS: usize = 5;

/// Runs `intervene(filters, seed)` for every sample × mode × count and returns the
/// per-sample records in (sample, mode, count) order.
fn run_sweep<F>(
    experiment: &str,
    model: &Model,
    pool: &[PoolEntry],
    kind: PoolKind,
    config: &SweepConfig,
    intervene: F,
) -> Result<ExperimentReport>
where
    F: Fn(&PoolEntry, &[usize], u64) -> Result<(f64, f64, f64)> + Sync,
{
    let start = Instant::now();
    if pool.is_empty() {
        return Err(Error::Empty(format!("{experiment} sample pool")));
    }
    config.validate(model.registry().filter_count())?;
    let per_sample: Vec<Vec<SampleRecord>> = pool
        .par_iter()
        .map(|entry| {
            let mut out = Vec::with_capacity(config.modes.len() * config.counts.len());
            for &mode in &config.modes {
                for &k in &config.counts {
                    let seed = selection_seed(config.seed, entry.sample_id, k);
                    let filters = select_filters(&entry.profile, mode, k, seed)?;
                    let (delta_predicted, delta_true, correct_after) = intervene(entry, &filters, seed)?;
                    out.push(SampleRecord { sample_id: entry.sample_id, mode, k, delta_predicted, delta_true, correct_after });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let records: Vec<SampleRecord> = per_sample.into_iter().flatten().collect();
    let rows = aggregate(&records, config)?;
    Ok(ExperimentReport {
        experiment: experiment.to_string(),
        pool: kind,
        config: config.clone(),
        rows,
        records,
        runtime: start.elapsed(),
    })
}

fn outcome(model: &Model, entry: &PoolEntry) -> Result<(f64, f64, f64)> {
    let p = model.predict(&entry.image)?;
    Ok((
        p.confidences[entry.predicted] - entry.confidences[entry.predicted],
        p.confidences[entry.label] - entry.confidences[entry.label],
        if p.predicted == entry.label { 1.0 } else { 0.0 },
    ))
}

fn prune_outcome(model: &Model, entry: &PoolEntry, filters: &[usize]) -> Result<(f64, f64, f64)> {
    if filters.is_empty() {
        return outcome(model, entry);
    }
    outcome(&prune_filters(model, filters)?, entry)
}

/// Prunes per-sample filter selections on misclassified samples and records the change in
/// the (incorrect) predicted-class and true-class confidences.
pub fn pruning_sweep(model: &Model, pool: &[PoolEntry], config: &SweepConfig) -> Result<ExperimentReport> {
    if pool.iter().any(|e| e.predicted == e.label) {
        return Err(Error::invalid("pruning sweep expects misclassified samples"));
    }
    run_sweep("prune", model, pool, PoolKind::Misclassified, config, |e, f, _| prune_outcome(model, e, f))
}

/// The pruning sweep on correctly classified samples; `delta_predicted` tracks the
/// confidence of the (correct) predicted class.
pub fn correct_pool_pruning(model: &Model, pool: &[PoolEntry], config: &SweepConfig) -> Result<ExperimentReport> {
    if pool.iter().any(|e| e.predicted != e.label) {
        return Err(Error::invalid("correct-pool pruning expects correctly classified samples"));
    }
    run_sweep("prune_correct", model, pool, PoolKind::Correct, config, |e, f, _| prune_outcome(model, e, f))
}

/// Adds `N(0, noise_std²)` noise to the selected kernel weights, averaging the outcome over
/// [`PERTURB_NOISE_SEEDS`] draws per sample.
pub fn perturbation_sweep(
    model: &Model,
    pool: &[PoolEntry],
    config: &SweepConfig,
    noise_std: f64,
) -> Result<ExperimentReport> {
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise std must be non-negative"));
    }
    let kind = if pool.iter().all(|e| e.predicted == e.label) && !pool.is_empty() {
        PoolKind::Correct
    } else {
        PoolKind::Misclassified
    };
    run_sweep("perturb", model, pool, kind, config, |entry, filters, seed| {
        if filters.is_empty() || noise_std == 0.0 {
            return outcome(model, entry);
        }
        let mut acc = (0.0, 0.0, 0.0);
        for draw in 0..PERTURB_NOISE_SEEDS {
            let noisy = perturb_filters(model, filters, noise_std, derive_seed(seed, draw as u64))?;
            let o = outcome(&noisy, entry)?;
            acc = (acc.0 + o.0, acc.1 + o.1, acc.2 + o.2);
        }
        let n = PERTURB_NOISE_SEEDS as f64;
        Ok((acc.0 / n, acc.1 / n, acc.2 / n))
    })
}
