use serde::{Deserialize, Serialize};

use super::{input_saliency_map, BoostSpec};
use crate::error::{Error, Result};
use crate::nn::{randomize_stages, Model};
use crate::saliency::compute_stats;
use crate::tensor::Tensor;

/// Ranks starting at 1, tied values sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("spearman", format!("lengths {} and {}", a.len(), b.len())));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Cascading stage sets from the deepest convolutional stage towards the input,
/// ending with the whole network.
pub fn cascade_stage_sets(model: &Model) -> Vec<Vec<usize>> {
    let names = model.stage_names();
    let body: Vec<usize> = (0..names.len()).filter(|&s| names[s].starts_with("stage")).collect();
    let mut sets: Vec<Vec<usize>> = (0..body.len()).rev().map(|j| body[j..].to_vec()).collect();
    let all: Vec<usize> = (0..names.len()).collect();
    if sets.last() != Some(&all) {
        sets.push(all);
    }
    sets
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityRow {
    /// Randomized stages; empty for the unmodified model.
    pub stages: Vec<usize>,
    pub spearman: f64,
}

/// Input saliency maps of randomized copies of `model`, compared with the original map by
/// Spearman rank correlation. For each model the boosted filters are re-derived and the
/// profile statistics recomputed on `reference`.
pub fn sanity_randomization(
    model: &Model,
    image: &Tensor,
    label: usize,
    spec: &BoostSpec,
    stage_sets: &[Vec<usize>],
    reference: &[(&Tensor, usize)],
    seed: u64,
) -> Result<Vec<SanityRow>> {
    let map_for = |m: &Model| -> Result<Vec<f64>> {
        let stats = compute_stats(m, reference, "sanity_reference")?;
        Ok(input_saliency_map(m, image, label, &stats, spec)?.values)
    };
    let original = map_for(model)?;
    let mut rows = vec![SanityRow { stages: Vec::new(), spearman: spearman(&original, &original)? }];
    for stages in stage_sets {
        let randomized = randomize_stages(model, stages, seed)?;
        let map = map_for(&randomized)?;
        rows.push(SanityRow { stages: stages.clone(), spearman: spearman(&original, &map)? });
    }
    Ok(rows)
}
