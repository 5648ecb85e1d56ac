use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PixelSaliencyMap;
use crate::data::Rect;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Replacement value for masked pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MaskFill {
    /// Per-channel training-set mean, which is 0 for normalized images.
    #[default]
    DatasetMean,
    Constant { value: f64 },
}

impl MaskFill {
    fn value(self) -> f64 {
        match self {
            MaskFill::DatasetMean => 0.0,
            MaskFill::Constant { value } => value,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub regions: Vec<Rect>,
    /// Explicit `H × W` row-major pixel mask, combined with `regions` by union.
    pub pixels: Option<Vec<bool>>,
    pub fill: MaskFill,
    /// Pixels inside this rectangle are never masked.
    pub protect: Option<Rect>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutcome {
    pub image: Tensor,
    /// `H × W` pixels that were replaced.
    pub mask: Vec<bool>,
    pub masked: usize,
    /// Nothing was eligible for masking.
    pub empty: bool,
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape("mask", format!("image {s:?} is not [C, H, W]"))),
    }
}

fn check_rect(r: &Rect, h: usize, w: usize) -> Result<()> {
    if r.fits(h, w) {
        Ok(())
    } else {
        Err(Error::invalid(format!("rectangle {r:?} outside {h}×{w} image")))
    }
}

fn fill_pixels(image: &Tensor, mask: Vec<bool>, fill: MaskFill) -> MaskOutcome {
    let plane = mask.len();
    let mut out = image.clone();
    let v = fill.value();
    for ch in out.data_mut().chunks_mut(plane) {
        ch.iter_mut().zip(&mask).filter(|(_, &m)| m).for_each(|(x, _)| *x = v);
    }
    let masked = mask.iter().filter(|&&m| m).count();
    MaskOutcome { image: out, mask, masked, empty: masked == 0 }
}

fn protected(protect: Option<&Rect>, h: usize, w: usize) -> Result<Vec<bool>> {
    let mut p = vec![false; h * w];
    if let Some(r) = protect {
        check_rect(r, h, w)?;
        for i in r.top..r.top + r.height {
            p[i * w + r.left..i * w + r.left + r.width].iter_mut().for_each(|v| *v = true);
        }
    }
    Ok(p)
}

/// Replaces the pixels covered by the spec (across all channels) with the fill value.
pub fn apply_mask(image: &Tensor, spec: &MaskSpec) -> Result<MaskOutcome> {
    let (_, h, w) = dims(image)?;
    let prot = protected(spec.protect.as_ref(), h, w)?;
    let mut mask = match &spec.pixels {
        Some(p) if p.len() != h * w => {
            return Err(Error::shape("apply_mask", format!("pixel mask of {} for {h}×{w}", p.len())));
        }
        Some(p) => p.clone(),
        None => vec![false; h * w],
    };
    for r in &spec.regions {
        check_rect(r, h, w)?;
        for i in r.top..r.top + r.height {
            mask[i * w + r.left..i * w + r.left + r.width].iter_mut().for_each(|v| *v = true);
        }
    }
    mask.iter_mut().zip(&prot).filter(|(_, &p)| p).for_each(|(m, _)| *m = false);
    Ok(fill_pixels(image, mask, spec.fill))
}

/// Masks the `⌈p% · eligible⌉` highest-valued pixels of `map` outside `protect`;
/// ties go to the lowest linear pixel index.
pub fn mask_top_percent(
    image: &Tensor,
    map: &PixelSaliencyMap,
    percent: f64,
    protect: Option<&Rect>,
    fill: MaskFill,
) -> Result<MaskOutcome> {
    let (_, h, w) = dims(image)?;
    if map.height != h || map.width != w {
        return Err(Error::shape("mask_top_percent", format!("map {}×{} vs image {h}×{w}", map.height, map.width)));
    }
    if !(percent > 0.0 && percent < 100.0) {
        return Err(Error::invalid(format!("percent must lie in (0, 100), got {percent}")));
    }
    let prot = protected(protect, h, w)?;
    let mut eligible: Vec<usize> = (0..h * w).filter(|&i| !prot[i]).collect();
    let count = (percent / 100.0 * eligible.len() as f64).ceil() as usize;
    eligible.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));
    let mut mask = vec![false; h * w];
    eligible.into_iter().take(count).for_each(|i| mask[i] = true);
    Ok(fill_pixels(image, mask, fill))
}

/// Masks `count` uniformly chosen pixels outside `protect`.
pub fn random_control_mask(
    image: &Tensor,
    count: usize,
    protect: Option<&Rect>,
    fill: MaskFill,
    seed: u64,
) -> Result<MaskOutcome> {
    let (_, h, w) = dims(image)?;
    let prot = protected(protect, h, w)?;
    let eligible: Vec<usize> = (0..h * w).filter(|&i| !prot[i]).collect();
    if count > eligible.len() {
        return Err(Error::invalid(format!("cannot mask {count} of {} eligible pixels", eligible.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; h * w];
    for k in rand::seq::index::sample(&mut rng, eligible.len(), count) {
        mask[eligible[k]] = true;
    }
    Ok(fill_pixels(image, mask, fill))
}
