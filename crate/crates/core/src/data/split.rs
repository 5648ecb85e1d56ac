use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.6, val: 0.2, holdout: 0.2, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.holdout];
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must lie in [0, 1] and sum to 1"));
        }
        Ok(())
    }
}

/// Shuffles with `spec.seed` and cuts into train / val / holdout of
/// `round(f · n)` samples each (holdout takes the remainder).
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (spec.train * n as f64).round() as usize;
    let n_val = ((spec.val * n as f64).round() as usize).min(n - n_train);
    let parts = [&order[..n_train], &order[n_train..n_train + n_val], &order[n_train + n_val..]];
    for (name, p) in ["train", "val", "holdout"].iter().zip(&parts) {
        if p.is_empty() {
            return Err(Error::Empty(format!("{name} split of {n} samples")));
        }
    }
    Ok((dataset.select(parts[0])?, dataset.select(parts[1])?, dataset.select(parts[2])?))
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn compute(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("normalization reference".into()));
        }
        let [c, h, w] = dataset.image_shape;
        let plane = h * w;
        let count = (dataset.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        for s in &dataset.samples {
            for ch in 0..c {
                mean[ch] += s.image.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for s in &dataset.samples {
            for ch in 0..c {
                var[ch] += s.image.data()[ch * plane..(ch + 1) * plane].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = var.into_iter().map(|v| (v / count).sqrt().max(1e-12)).collect();
        Ok(NormalizationStats { mean, std })
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        let c = dataset.image_shape[0];
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::shape("normalize", format!("stats have {} channels, images {c}", self.mean.len())));
        }
        let plane = dataset.image_shape[1] * dataset.image_shape[2];
        let mut out = dataset.clone();
        for s in &mut out.samples {
            for (i, v) in s.image.data_mut().iter_mut().enumerate() {
                let ch = i / plane;
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
        Ok(out)
    }

    /// Maps a normalized `[C, H, W]` image back to the [0, 1] pixel range.
    pub fn denormalize(&self, image: &crate::tensor::Tensor) -> crate::tensor::Tensor {
        let plane = image.shape()[1] * image.shape()[2];
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i / plane;
            *v = *v * self.std[ch] + self.mean[ch];
        }
        out
    }
}

/// Standardizes all three splits with statistics of the training split.
pub fn normalize(
    train: &Dataset,
    val: &Dataset,
    holdout: &Dataset,
) -> Result<(Dataset, Dataset, Dataset, NormalizationStats)> {
    let stats = NormalizationStats::compute(train)?;
    Ok((stats.apply(train)?, stats.apply(val)?, stats.apply(holdout)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, SynthConfig};

    fn ds(n_per_class: usize) -> Dataset {
        synth_blobs(&SynthConfig { num_classes: 2, per_class: n_per_class, image_shape: [3, 6, 6], ..Default::default() })
            .unwrap()
    }

    #[test]
    fn sizes_and_disjointness() {
        let d = ds(50);
        let (a, b, c) = split(&d, &SplitSpec { train: 0.8, val: 0.1, holdout: 0.1, seed: 3 }).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut ids: Vec<usize> = a.ids().into_iter().chain(b.ids()).chain(c.ids()).collect();
        ids.sort();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_membership() {
        let d = ds(20);
        let spec = SplitSpec { seed: 9, ..Default::default() };
        let (a1, b1, c1) = split(&d, &spec).unwrap();
        let (a2, b2, c2) = split(&d, &spec).unwrap();
        assert_eq!((a1.ids(), b1.ids(), c1.ids()), (a2.ids(), b2.ids(), c2.ids()));
    }

    #[test]
    fn empty_split_and_bad_fractions_fail() {
        let d = ds(2);
        assert!(matches!(split(&d, &SplitSpec { train: 1.0, val: 0.0, holdout: 0.0, seed: 0 }), Err(Error::Empty(_))));
        assert!(split(&d, &SplitSpec { train: 0.5, val: 0.5, holdout: 0.5, seed: 0 }).is_err());
    }

    #[test]
    fn normalized_train_split_is_standard() {
        let d = ds(30);
        let (a, b, c) = split(&d, &SplitSpec::default()).unwrap();
        let (na, _, _, stats) = normalize(&a, &b, &c).unwrap();
        let again = NormalizationStats::compute(&na).unwrap();
        for ch in 0..3 {
            assert!(again.mean[ch].abs() < 1e-6);
            assert!((again.std[ch] - 1.0).abs() < 1e-6);
        }
        let back = stats.denormalize(&na.samples[0].image);
        assert!(back.max_abs_diff(&a.samples[0].image) < 1e-12);
    }
}
