use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Rect, Sample};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

/// Parameters of the synthetic striped-blob dataset.
///
/// Every class is a striped, colored Gaussian blob. Classes `2j` and `2j + 1` share
/// the stripe orientation and differ only in color, so confusions concentrate in
/// those pairs. A fraction of images also carries a smaller patch of the partner
/// class's pattern somewhere else in the frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_shape: [usize; 3],
    /// Scales every class-dependent signal; 0 makes all classes identically distributed.
    pub separation: f64,
    /// Color distance between the two members of a pair, relative to the distance between pairs.
    pub pair_gap: f64,
    /// Probability that an image contains a partner-class distractor patch.
    pub distractor_prob: f64,
    /// Distractor amplitude relative to the main object.
    pub distractor_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 10,
            per_class: 100,
            image_shape: [3, 16, 16],
            separation: 1.0,
            pair_gap: 0.35,
            distractor_prob: 0.5,
            distractor_strength: 0.9,
            noise_std: 0.12,
            seed: 0,
        }
    }
}

struct ClassPattern {
    color: Vec<f64>,
    angle: f64,
    freq: f64,
}

fn class_patterns(cfg: &SynthConfig) -> Vec<ClassPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let channels = cfg.image_shape[0];
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n_pairs = cfg.num_classes.div_ceil(2);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..channels).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let mut out = Vec::with_capacity(cfg.num_classes);
    for p in 0..n_pairs {
        let base = unit(&mut rng);
        let dir = unit(&mut rng);
        let angle = PI * p as f64 / n_pairs as f64;
        let freq = 0.22 + 0.06 * (p % 3) as f64;
        for m in 0..2 {
            if out.len() == cfg.num_classes {
                break;
            }
            let sign = if m == 0 { -0.5 } else { 0.5 };
            let color = base.iter().zip(&dir).map(|(b, d)| b + sign * cfg.pair_gap * d).collect();
            out.push(ClassPattern { color, angle, freq });
        }
    }
    out
}

fn partner(c: usize, num_classes: usize) -> usize {
    let p = c ^ 1;
    if p < num_classes {
        p
    } else {
        (c + 1) % num_classes
    }
}

/// Adds `amp · pattern` inside a Gaussian envelope of radius `radius` centered at `(cy, cx)`.
#[allow(clippy::too_many_arguments)]
fn stamp(img: &mut [f64], shape: [usize; 3], pat: &ClassPattern, cy: f64, cx: f64, radius: f64, amp: f64, phase: f64) {
    let [c, h, w] = shape;
    let (s, co) = pat.angle.sin_cos();
    for i in 0..h {
        for j in 0..w {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            let env = (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp();
            if env < 1e-4 {
                continue;
            }
            let stripe = 0.5 + 0.5 * (2.0 * PI * pat.freq * (dx * co + dy * s) + phase).cos();
            let v = amp * env * stripe;
            for ch in 0..c {
                img[(ch * h + i) * w + j] += v * pat.color[ch];
            }
        }
    }
}

fn bounding_box(cy: f64, cx: f64, radius: f64, h: usize, w: usize) -> Rect {
    let r = 2.0 * radius;
    let top = (cy - r).floor().max(0.0) as usize;
    let left = (cx - r).floor().max(0.0) as usize;
    let bottom = ((cy + r).ceil() as usize + 1).min(h);
    let right = ((cx + r).ceil() as usize + 1).min(w);
    Rect { top, left, height: bottom.saturating_sub(top).max(1), width: right.saturating_sub(left).max(1) }
}

/// Generates `num_classes × per_class` images with values in [0, 1]. Sample `id` has
/// label `id % num_classes` and is generated from its own seed, so the output does not
/// depend on generation order.
pub fn synth_blobs(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.per_class == 0 || cfg.image_shape.contains(&0) {
        return Err(Error::invalid("synthetic dataset needs ≥ 2 classes, ≥ 1 sample per class and a positive shape"));
    }
    if !(0.0..=1.0).contains(&cfg.distractor_prob) || cfg.noise_std < 0.0 || cfg.separation < 0.0 {
        return Err(Error::invalid("synthetic dataset parameters out of range"));
    }
    let patterns = class_patterns(cfg);
    let [c, h, w] = cfg.image_shape;
    let (hf, wf) = (h as f64, w as f64);
    let radius = hf.min(wf) / 6.0;
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let n = cfg.num_classes * cfg.per_class;
    let mut samples = Vec::with_capacity(n);
    for id in 0..n {
        let label = id % cfg.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, id as u64));
        let mut img = vec![0.5; c * h * w];
        let cy = hf / 2.0 + rng.random_range(-0.2..0.2) * hf;
        let cx = wf / 2.0 + rng.random_range(-0.2..0.2) * wf;
        let amp = cfg.separation * rng.random_range(0.25..0.45);
        let phase = rng.random_range(0.0..2.0 * PI);
        stamp(&mut img, cfg.image_shape, &patterns[label], cy, cx, radius, amp, phase);
        if rng.random_bool(cfg.distractor_prob) {
            let other = partner(label, cfg.num_classes);
            // place the distractor in a corner region away from the object
            let dy = if cy < hf / 2.0 { hf * 0.8 } else { hf * 0.2 };
            let dx = if rng.random_bool(0.5) { wf * 0.8 } else { wf * 0.2 };
            let dy = dy + rng.random_range(-0.08..0.08) * hf;
            let dx = dx + rng.random_range(-0.08..0.08) * wf;
            let damp = amp * cfg.distractor_strength * rng.random_range(0.6..1.4);
            let dphase = rng.random_range(0.0..2.0 * PI);
            stamp(&mut img, cfg.image_shape, &patterns[other], dy, dx, radius * 0.8, damp, dphase);
        }
        if cfg.noise_std > 0.0 {
            for v in img.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        samples.push(Sample {
            id,
            image: Tensor::from_parts(cfg.image_shape.to_vec(), img),
            label,
            object: Some(bounding_box(cy, cx, radius, h, w)),
        });
    }
    Dataset::new("synth_blobs", cfg.image_shape, cfg.num_classes, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(per_class: usize) -> SynthConfig {
        SynthConfig { num_classes: 2, per_class, image_shape: [3, 8, 8], ..SynthConfig::default() }
    }

    #[test]
    fn counts_labels_and_range() {
        let ds = synth_blobs(&small(10)).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.labels().iter().filter(|&&l| l == 1).count(), 10);
        assert!(ds.samples.iter().all(|s| s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_blobs(&small(5)).unwrap(), synth_blobs(&small(5)).unwrap());
        let other = SynthConfig { seed: 1, ..small(5) };
        assert_ne!(synth_blobs(&small(5)).unwrap(), synth_blobs(&other).unwrap());
    }

    #[test]
    fn sample_does_not_depend_on_dataset_size() {
        let a = synth_blobs(&small(5)).unwrap();
        let b = synth_blobs(&small(50)).unwrap();
        assert_eq!(a.samples[7], b.samples[7]);
    }

    #[test]
    fn zero_separation_removes_class_signal() {
        let cfg = SynthConfig { separation: 0.0, noise_std: 0.0, ..small(3) };
        let ds = synth_blobs(&cfg).unwrap();
        assert!(ds.samples.iter().all(|s| s.image.data().iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn object_box_is_inside_image() {
        let ds = synth_blobs(&SynthConfig { per_class: 20, ..SynthConfig::default() }).unwrap();
        for s in &ds.samples {
            let r = s.object.unwrap();
            assert!(r.top + r.height <= 16 && r.left + r.width <= 16 && r.height > 0 && r.width > 0);
        }
    }
}
