use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FilterRegistry;

/// Element-wise mean of equally long profiles.
pub fn average_profiles(profiles: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = profiles.first().ok_or_else(|| Error::Empty("profile group".into()))?;
    let mut acc = vec![0.0; first.len()];
    for p in profiles {
        if p.len() != acc.len() {
            return Err(Error::shape("average_profiles", format!("{} vs {}", p.len(), acc.len())));
        }
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    let n = profiles.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SortedEntry {
    pub layer_id: usize,
    pub rank_in_layer: usize,
    pub filter_id: usize,
    pub value: f64,
}

/// Filters sorted in descending order within each layer, layers concatenated shallow to deep.
pub fn sorted_per_layer(profile: &[f64], registry: &FilterRegistry) -> Result<Vec<SortedEntry>> {
    if profile.len() != registry.filter_count() {
        return Err(Error::shape("sorted_per_layer", format!("{} vs {}", profile.len(), registry.filter_count())));
    }
    let mut out = Vec::with_capacity(profile.len());
    for layer in registry.layers() {
        let mut ids: Vec<usize> = layer.filters().collect();
        ids.sort_by(|&a, &b| profile[b].total_cmp(&profile[a]).then(a.cmp(&b)));
        out.extend(ids.into_iter().enumerate().map(|(rank, id)| SortedEntry {
            layer_id: layer.layer_id,
            rank_in_layer: rank,
            filter_id: id,
            value: profile[id],
        }));
    }
    Ok(out)
}

pub fn write_sorted_csv(entries: &[SortedEntry], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "layer_id,rank_in_layer,value")?;
    for e in entries {
        writeln!(f, "{},{},{}", e.layer_id, e.rank_in_layer, e.value)?;
    }
    f.flush()?;
    Ok(())
}
