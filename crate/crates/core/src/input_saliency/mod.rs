mod mask;
mod postprocess;
mod sanity;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, concat, GradMode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BnMode, Model};
use crate::saliency::{filter_profile, rank_descending, standardize, ProfileStats};
use crate::tensor::{cosine_similarity, Tensor};

pub use mask::{apply_mask, mask_top_percent, random_control_mask, MaskFill, MaskOutcome, MaskSpec};
pub use postprocess::{gaussian_kernel3, postprocess_map, BLUR_SIGMA, DEFAULT_PERCENTILE};
pub use sanity::{cascade_stage_sets, sanity_randomization, spearman, SanityRow};

pub const DEFAULT_TOP_FILTERS: usize = 10;
pub const DEFAULT_BOOST: f64 = 100.0;

/// Which filters of the standardized profile to boost, and by how much.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostSpec {
    /// Explicit filter set; `None` picks the `top_filters` most salient filters of the sample.
    pub filters: Option<Vec<usize>>,
    pub top_filters: usize,
    pub boost: f64,
}

impl Default for BoostSpec {
    fn default() -> Self {
        BoostSpec { filters: None, top_filters: DEFAULT_TOP_FILTERS, boost: DEFAULT_BOOST }
    }
}

impl BoostSpec {
    pub fn explicit(filters: Vec<usize>, boost: f64) -> Self {
        BoostSpec { filters: Some(filters), top_filters: 0, boost }
    }

    /// The concrete filter set for a standardized profile, validated against its length.
    pub fn resolve(&self, standardized: &[f64]) -> Result<Vec<usize>> {
        if !(self.boost >= 1.0) || !self.boost.is_finite() {
            return Err(Error::invalid(format!("boost factor must be at least 1, got {}", self.boost)));
        }
        let set = match &self.filters {
            Some(f) => f.clone(),
            None => rank_descending(standardized).into_iter().take(self.top_filters).collect(),
        };
        if set.is_empty() {
            return Err(Error::invalid("boost filter set is empty"));
        }
        if let Some(&bad) = set.iter().find(|&&i| i >= standardized.len()) {
            return Err(Error::invalid(format!("filter {bad} out of range ({} filters)", standardized.len())));
        }
        Ok(set)
    }
}

/// `s′_F`: entries in `filters` multiplied by `boost`, others unchanged.
pub fn boost_profile(standardized: &[f64], filters: &[usize], boost: f64) -> Result<Vec<f64>> {
    let spec = BoostSpec::explicit(filters.to_vec(), boost);
    let set = spec.resolve(standardized)?;
    let mut out = standardized.to_vec();
    let mut seen = vec![false; out.len()];
    for i in set {
        if !std::mem::replace(&mut seen[i], true) {
            out[i] *= boost;
        }
    }
    Ok(out)
}

/// Channel-aggregated pixel saliency `H × W`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelSaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub filters: Vec<usize>,
    pub boost: f64,
    pub postprocessed: bool,
    /// Set when post-processing met a constant map and produced all zeros.
    #[serde(default)]
    pub degenerate: bool,
}

impl PixelSaliencyMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// `ŝ(x, y)` as a differentiable function of the input variable `x` (`[1, C, H, W]`).
/// Kernel weights are bound on `tape`; `μ` and `1/σ` enter as constants.
pub(crate) fn standardized_profile_var<'t>(
    model: &Model,
    tape: &'t Tape,
    x: Var<'t>,
    label: usize,
    stats: &ProfileStats,
) -> Result<Var<'t>> {
    let reg = model.registry();
    if stats.len() != reg.filter_count() {
        return Err(Error::shape("input saliency", format!("stats {} vs {} filters", stats.len(), reg.filter_count())));
    }
    let vars = model.bind_kernel_weights(tape)?;
    let logits = model.forward(&vars, x, BnMode::Eval)?.logits;
    let loss = logits.softmax_cross_entropy(&[label])?;
    let grads = backward(loss, &model.kernel_weight_vars(&vars), GradMode::Higher)?;
    let flat: Vec<Var<'t>> = grads.grads.into_iter().map(|g| g.flatten()).collect::<Result<_>>()?;
    let s_bar = concat(&flat)?.abs()?.mean_over_index_set(reg.index_sets())?;
    let mu = tape.constant(Tensor::from_vec(stats.mean.clone()))?;
    let inv_std = tape.constant(Tensor::from_vec(stats.inv_std()))?;
    s_bar.sub(mu)?.mul(inv_std)
}

fn input_var<'t>(tape: &'t Tape, model: &Model, image: &Tensor) -> Result<Var<'t>> {
    if image.shape() != model.spec().input_shape {
        return Err(Error::shape("input saliency", format!("image {:?}", image.shape())));
    }
    tape.var(Tensor::stack(&[image])?)
}

/// `D_C(ŝ(x, y), target)` evaluated without building a second-order graph.
pub fn boosted_cosine_distance(
    model: &Model,
    image: &Tensor,
    label: usize,
    stats: &ProfileStats,
    target: &[f64],
) -> Result<f64> {
    let s = standardize(&filter_profile(model, image, label)?, stats)?;
    if target.len() != s.len() {
        return Err(Error::shape("boosted_cosine_distance", format!("target {} vs {}", target.len(), s.len())));
    }
    Ok(1.0 - cosine_similarity(&s, target))
}

/// Signed `∇_x D_C(ŝ(x, y), target)` (`[C, H, W]`) with `target`, `μ` and `σ` held constant.
/// Also returns the value of `ŝ(x, y)`.
pub fn input_gradient(
    model: &Model,
    image: &Tensor,
    label: usize,
    stats: &ProfileStats,
    target: &[f64],
) -> Result<(Tensor, Vec<f64>)> {
    let tape = Tape::new();
    let x = input_var(&tape, model, image)?;
    let s_hat = standardized_profile_var(model, &tape, x, label, stats)?;
    let s_val = s_hat.value().data().to_vec();
    if target.len() != s_val.len() {
        return Err(Error::shape("input_gradient", format!("target {} vs {}", target.len(), s_val.len())));
    }
    gradient_towards(&tape, x, s_hat, &s_val, target)
        .map(|g| (g, s_val))
        .and_then(|(g, s)| Ok((g.reshape(image.shape())?, s)))
}

fn gradient_towards<'t>(tape: &'t Tape, x: Var<'t>, s_hat: Var<'t>, s_val: &[f64], target: &[f64]) -> Result<Tensor> {
    if s_val.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("standardized profile has zero norm"));
    }
    if target.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("boosted target has zero norm"));
    }
    let t = tape.constant(Tensor::from_vec(target.to_vec()))?;
    let d = s_hat.cosine_distance(t)?;
    let g = backward(d, &[x], GradMode::First)?;
    let out = (*g.grads[0].value()).clone();
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "input_saliency" });
    }
    Ok(out)
}

/// Mean of absolute values over the channel axis of a `[C, H, W]` tensor.
pub fn channel_mean_abs(g: &Tensor) -> Vec<f64> {
    let s = g.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let mut out = vec![0.0; plane];
    for ch in g.data().chunks(plane) {
        out.iter_mut().zip(ch).for_each(|(o, v)| *o += v.abs());
    }
    out.iter_mut().for_each(|o| *o /= c as f64);
    out
}

/// Raw `M_F = |∇_x D_C(ŝ(x, y), s′_F)|`, channels reduced by the mean of absolute values.
/// The boosted target is derived from the sample's own `ŝ` and treated as a constant.
pub fn input_saliency_map(
    model: &Model,
    image: &Tensor,
    label: usize,
    stats: &ProfileStats,
    spec: &BoostSpec,
) -> Result<PixelSaliencyMap> {
    let tape = Tape::new();
    let x = input_var(&tape, model, image)?;
    let s_hat = standardized_profile_var(model, &tape, x, label, stats)?;
    let s_val = s_hat.value().data().to_vec();
    let filters = spec.resolve(&s_val)?;
    let target = boost_profile(&s_val, &filters, spec.boost)?;
    let g = gradient_towards(&tape, x, s_hat, &s_val, &target)?.reshape(image.shape())?;
    Ok(PixelSaliencyMap {
        height: image.shape()[1],
        width: image.shape()[2],
        values: channel_mean_abs(&g),
        filters,
        boost: spec.boost,
        postprocessed: false,
        degenerate: false,
    })
}

/// Raw maps for many samples, computed in parallel and returned in input order.
pub fn input_saliency_maps(
    model: &Model,
    samples: &[(&Tensor, usize)],
    stats: &ProfileStats,
    spec: &BoostSpec,
) -> Result<Vec<PixelSaliencyMap>> {
    samples.par_iter().map(|(img, y)| input_saliency_map(model, img, *y, stats, spec)).collect()
}

/// Mean and standard deviation of `ŝ` over a filter set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSetSaliency {
    pub mean: f64,
    pub std: f64,
    /// `mean` minus the original image's mean.
    pub delta: f64,
}

/// `ŝ` over the fixed set `filters` for the original image and each variant.
pub fn filter_saliency_delta(
    model: &Model,
    original: &Tensor,
    variants: &[Tensor],
    label: usize,
    filters: &[usize],
    stats: &ProfileStats,
) -> Result<(FilterSetSaliency, Vec<FilterSetSaliency>)> {
    if filters.is_empty() {
        return Err(Error::invalid("filter set is empty"));
    }
    let summarize = |img: &Tensor| -> Result<(f64, f64)> {
        let s = standardize(&filter_profile(model, img, label)?, stats)?;
        if let Some(&bad) = filters.iter().find(|&&i| i >= s.len()) {
            return Err(Error::invalid(format!("filter {bad} out of range")));
        }
        let n = filters.len() as f64;
        let mean = filters.iter().map(|&i| s[i]).sum::<f64>() / n;
        let var = filters.iter().map(|&i| (s[i] - mean).powi(2)).sum::<f64>() / n;
        Ok((mean, var.sqrt()))
    };
    let (m0, s0) = summarize(original)?;
    let base = FilterSetSaliency { mean: m0, std: s0, delta: 0.0 };
    let rest = variants
        .par_iter()
        .map(|v| summarize(v).map(|(mean, std)| FilterSetSaliency { mean, std, delta: mean - m0 }))
        .collect::<Result<Vec<_>>>()?;
    Ok((base, rest))
}
