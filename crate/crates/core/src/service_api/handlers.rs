use std::ops::Range;
use std::sync::Arc;

use axum::extract::{FromRequest, FromRequestParts, State};
use axum::http::StatusCode;
use axum::Json;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{encode_heatmap_png, encode_image_png, ApiError, AppState};
use crate::data::{Rect, Sample};
use crate::experiments::select_filters;
use crate::input_saliency::{
    apply_mask, filter_saliency_delta, input_saliency_map, postprocess_map, BoostSpec, MaskSpec, DEFAULT_BOOST,
    DEFAULT_PERCENTILE, DEFAULT_TOP_FILTERS,
};
use crate::nn::{prune_filters, ConvLayerInfo, ModelSpec, Prediction};
use crate::profile_index::{NeighborQuery, Pool, QueryTarget, RowMeta};
use crate::saliency::{filter_profile, sorted_per_layer, standardize, SortedEntry};
use crate::tensor::Tensor;
use crate::trainer::{targeted_finetune, FinetuneStep, SelectionMode};

#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub(super) struct Body<T>(T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
pub(super) struct Query<T>(T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Path), rejection(ApiError))]
pub(super) struct Id<T>(T);

type Reply<T> = Result<Json<T>, ApiError>;

/// Runs CPU-bound work off the async executor.
async fn blocking<T, F>(f: F) -> Reply<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json),
        Err(e) => Err(ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal", message: e.to_string() }),
    }
}

fn base64_png(bytes: Vec<u8>) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn standardized_profile(state: &AppState, sample: &Sample) -> Result<Vec<f64>, ApiError> {
    Ok(standardize(&filter_profile(&state.model, &sample.image, sample.label)?, &state.stats)?)
}

#[derive(Serialize)]
pub(super) struct ModelInfo {
    spec: ModelSpec,
    filter_count: usize,
    num_params: usize,
    num_classes: usize,
    stages: Vec<String>,
    layers: Vec<ConvLayerInfo>,
    layer_boundaries: Vec<Range<usize>>,
}

pub(super) async fn model(State(state): State<Arc<AppState>>) -> Reply<ModelInfo> {
    let m = &state.model;
    Ok(Json(ModelInfo {
        spec: m.spec().clone(),
        filter_count: m.registry().filter_count(),
        num_params: m.num_params(),
        num_classes: m.num_classes(),
        stages: m.stage_names().to_vec(),
        layers: m.registry().layers().to_vec(),
        layer_boundaries: m.registry().layer_boundaries(),
    }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub(super) enum SampleFilter {
    #[default]
    All,
    Misclassified,
    Correct,
}

fn default_split() -> String {
    "val".into()
}

fn default_limit() -> usize {
    50
}

const MAX_PAGE: usize = 1000;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct ListQuery {
    #[serde(default = "default_split")]
    split: String,
    #[serde(default)]
    filter: SampleFilter,
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

#[derive(Serialize)]
pub(super) struct SampleMeta {
    id: usize,
    split: &'static str,
    label: usize,
    predicted: usize,
    confidences: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    object: Option<Rect>,
}

impl SampleMeta {
    fn new(split: &'static str, s: &Sample, p: &Prediction) -> Self {
        SampleMeta {
            id: s.id,
            split,
            label: s.label,
            predicted: p.predicted,
            confidences: p.confidences.clone(),
            object: s.object,
        }
    }
}

#[derive(Serialize)]
pub(super) struct SamplePage {
    split: &'static str,
    total: usize,
    offset: usize,
    items: Vec<SampleMeta>,
}

pub(super) async fn list_samples(State(state): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> Reply<SamplePage> {
    if q.limit == 0 || q.limit > MAX_PAGE {
        return Err(ApiError::bad_request(format!("limit must lie in 1..={MAX_PAGE}")));
    }
    let split = super::SPLITS
        .into_iter()
        .find(|s| *s == q.split)
        .ok_or_else(|| ApiError::bad_request(format!("unknown split {:?}", q.split)))?;
    let ds = state.split(split)?;
    let preds = &state.predictions[split];
    let matching: Vec<usize> = (0..ds.len())
        .filter(|&i| match q.filter {
            SampleFilter::All => true,
            SampleFilter::Misclassified => preds[i].predicted != ds.samples[i].label,
            SampleFilter::Correct => preds[i].predicted == ds.samples[i].label,
        })
        .collect();
    let items = matching
        .iter()
        .skip(q.offset)
        .take(q.limit)
        .map(|&i| SampleMeta::new(split, &ds.samples[i], &preds[i]))
        .collect();
    Ok(Json(SamplePage { split, total: matching.len(), offset: q.offset, items }))
}

#[derive(Serialize)]
pub(super) struct SampleDetail {
    #[serde(flatten)]
    meta: SampleMeta,
    shape: Vec<usize>,
    image_png: String,
}

pub(super) async fn sample(State(state): State<Arc<AppState>>, Id(id): Id<usize>) -> Reply<SampleDetail> {
    let (split, s, p) = state.sample(id)?;
    let png = encode_image_png(&state.data.stats.denormalize(&s.image))?;
    Ok(Json(SampleDetail { meta: SampleMeta::new(split, s, p), shape: s.image.shape().to_vec(), image_png: base64_png(png) }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct ProfileQuery {
    #[serde(default)]
    sorted: Option<String>,
}

#[derive(Serialize)]
pub(super) struct ProfileReply {
    sample_id: usize,
    label: usize,
    predicted: usize,
    profile: Vec<f64>,
    layer_boundaries: Vec<Range<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sorted: Option<Vec<SortedEntry>>,
}

pub(super) async fn profile(
    State(state): State<Arc<AppState>>,
    Id(id): Id<usize>,
    Query(q): Query<ProfileQuery>,
) -> Reply<ProfileReply> {
    let per_layer = match q.sorted.as_deref() {
        None => false,
        Some("per_layer") => true,
        Some(other) => return Err(ApiError::bad_request(format!("unknown sort {other:?} (per_layer)"))),
    };
    blocking(move || {
        let (_, s, p) = state.sample(id)?;
        let profile = standardized_profile(&state, s)?;
        let sorted = if per_layer { Some(sorted_per_layer(&profile, state.model.registry())?) } else { None };
        Ok(ProfileReply {
            sample_id: id,
            label: s.label,
            predicted: p.predicted,
            layer_boundaries: state.model.registry().layer_boundaries(),
            profile,
            sorted,
        })
    })
    .await
}

fn default_k() -> usize {
    10
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct NeighborParams {
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default)]
    pool: SampleFilter,
    /// Inclusive layer range `a..b`, or a single layer `a`.
    #[serde(default)]
    layers: Option<String>,
}

fn parse_layers(text: &str) -> Result<(usize, usize), ApiError> {
    let bad = || ApiError::bad_request(format!("layers must look like a..b, got {text:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    match text.split_once("..") {
        Some((a, b)) => Ok((num(a)?, num(b)?)),
        None => num(text).map(|a| (a, a)),
    }
}

#[derive(Serialize)]
pub(super) struct NeighborRow {
    sample_id: usize,
    similarity: f64,
    label: usize,
    predicted: usize,
    correct: bool,
    shares_confusion_pair: bool,
}

#[derive(Serialize)]
pub(super) struct NeighborReply {
    sample_id: usize,
    truncated: bool,
    zero_norm_query: bool,
    neighbors: Vec<NeighborRow>,
}

pub(super) async fn neighbors(
    State(state): State<Arc<AppState>>,
    Id(id): Id<usize>,
    Query(q): Query<NeighborParams>,
) -> Reply<NeighborReply> {
    let layer_range = q.layers.as_deref().map(parse_layers).transpose()?;
    let pool = match q.pool {
        SampleFilter::All => Pool::All,
        SampleFilter::Misclassified => Pool::MisclassifiedOnly,
        SampleFilter::Correct => Pool::CorrectOnly,
    };
    blocking(move || {
        let (_, s, p) = state.sample(id)?;
        let target = if state.index.position(id).is_some() {
            QueryTarget::Sample(id)
        } else {
            QueryTarget::Profile(standardized_profile(&state, s)?)
        };
        let found = state.index.knn(&NeighborQuery { target, k: q.k, layer_range, pool })?;
        let me = RowMeta { sample_id: id, label: s.label, predicted: p.predicted };
        let neighbors = found
            .neighbors
            .into_iter()
            .map(|n| {
                let other = RowMeta { sample_id: n.sample_id, label: n.label, predicted: n.predicted };
                NeighborRow {
                    sample_id: n.sample_id,
                    similarity: n.similarity,
                    label: n.label,
                    predicted: n.predicted,
                    correct: other.correct(),
                    shares_confusion_pair: !me.correct() && !other.correct() && me.confusion_pair() == other.confusion_pair(),
                }
            })
            .collect();
        Ok(NeighborReply { sample_id: id, truncated: found.truncated, zero_norm_query: found.zero_norm_query, neighbors })
    })
    .await
}

fn default_top_filters() -> usize {
    DEFAULT_TOP_FILTERS
}

fn default_boost() -> f64 {
    DEFAULT_BOOST
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct SaliencyRequest {
    #[serde(default = "default_top_filters")]
    top_filters: usize,
    #[serde(default = "default_boost")]
    boost: f64,
    #[serde(default = "default_true")]
    postprocess: bool,
    /// Explicit filter set overriding `top_filters`.
    #[serde(default)]
    filters: Option<Vec<usize>>,
}

#[derive(Serialize)]
pub(super) struct SaliencyReply {
    sample_id: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    filters: Vec<usize>,
    boost: f64,
    postprocessed: bool,
    degenerate: bool,
    overlay_png: String,
}

pub(super) async fn input_saliency(
    State(state): State<Arc<AppState>>,
    Id(id): Id<usize>,
    Body(req): Body<SaliencyRequest>,
) -> Reply<SaliencyReply> {
    blocking(move || {
        let (_, s, _) = state.sample(id)?;
        let spec = BoostSpec { filters: req.filters, top_filters: req.top_filters, boost: req.boost };
        let filters = spec.resolve(&standardized_profile(&state, s)?)?;
        let key = (id, filters.clone(), req.boost.to_bits(), req.postprocess);
        let map = state.cached_map(key, || {
            let raw = input_saliency_map(&state.model, &s.image, s.label, &state.stats, &BoostSpec::explicit(filters, req.boost))?;
            if req.postprocess {
                postprocess_map(&raw, DEFAULT_PERCENTILE, true)
            } else {
                Ok(raw)
            }
        })?;
        Ok(SaliencyReply {
            sample_id: id,
            height: map.height,
            width: map.width,
            values: map.values.clone(),
            filters: map.filters.clone(),
            boost: map.boost,
            postprocessed: map.postprocessed,
            degenerate: map.degenerate,
            overlay_png: base64_png(encode_heatmap_png(&map)?),
        })
    })
    .await
}

/// Prediction of a modified input or model against the served one.
#[derive(Serialize)]
pub(super) struct Effect {
    confidences_before: Vec<f64>,
    confidences: Vec<f64>,
    predicted_before: usize,
    predicted: usize,
    corrected: bool,
    /// Change in the true-class confidence.
    delta_true: f64,
    /// Change in the confidence of the originally predicted class.
    delta_predicted: f64,
}

impl Effect {
    fn new(s: &Sample, before: &Prediction, after: Prediction) -> Self {
        Effect {
            delta_true: after.confidences[s.label] - before.confidences[s.label],
            delta_predicted: after.confidences[before.predicted] - before.confidences[before.predicted],
            corrected: before.predicted != s.label && after.predicted == s.label,
            confidences_before: before.confidences.clone(),
            predicted_before: before.predicted,
            predicted: after.predicted,
            confidences: after.confidences,
        }
    }
}

#[derive(Serialize)]
pub(super) struct MaskReply {
    #[serde(flatten)]
    effect: Effect,
    masked_pixels: usize,
    /// The original sample's most salient filters (the default boost set).
    filters: Vec<usize>,
    filter_saliency_before: f64,
    filter_saliency_after: f64,
    filter_saliency_delta: f64,
}

pub(super) async fn whatif_mask(
    State(state): State<Arc<AppState>>,
    Id(id): Id<usize>,
    Body(spec): Body<MaskSpec>,
) -> Reply<MaskReply> {
    blocking(move || {
        let (_, s, before) = state.sample(id)?;
        let outcome = apply_mask(&s.image, &spec)?;
        let after = state.model.predict(&outcome.image)?;
        let filters = BoostSpec::default().resolve(&standardized_profile(&state, s)?)?;
        let (base, variants) =
            filter_saliency_delta(&state.model, &s.image, std::slice::from_ref(&outcome.image), s.label, &filters, &state.stats)?;
        Ok(MaskReply {
            effect: Effect::new(s, before, after),
            masked_pixels: outcome.masked,
            filters,
            filter_saliency_before: base.mean,
            filter_saliency_after: variants[0].mean,
            filter_saliency_delta: variants[0].delta,
        })
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct PruneRequest {
    mode: SelectionMode,
    count: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
pub(super) struct PruneReply {
    #[serde(flatten)]
    effect: Effect,
    filters: Vec<usize>,
}

pub(super) async fn whatif_prune(
    State(state): State<Arc<AppState>>,
    Id(id): Id<usize>,
    Body(req): Body<PruneRequest>,
) -> Reply<PruneReply> {
    blocking(move || {
        let (_, s, before) = state.sample(id)?;
        let filters = select_filters(&standardized_profile(&state, s)?, req.mode, req.count, req.seed)?;
        let after = if filters.is_empty() {
            state.model.predict(&s.image)?
        } else {
            prune_filters(&state.model, &filters)?.predict(&s.image)?
        };
        Ok(PruneReply { effect: Effect::new(s, before, after), filters })
    })
    .await
}

fn default_step() -> f64 {
    1e-3
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct FinetuneRequest {
    mode: SelectionMode,
    count: usize,
    #[serde(default = "default_step")]
    step_size: f64,
    #[serde(default = "default_k")]
    neighbors: usize,
    #[serde(default)]
    allow_over_cap: bool,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
pub(super) struct NeighborEffect {
    sample_id: usize,
    similarity: f64,
    corrected: bool,
    delta_true: f64,
}

#[derive(Serialize)]
pub(super) struct FinetuneReply {
    filters: Vec<usize>,
    self_corrected: bool,
    zero_gradient: bool,
    loss_before: f64,
    loss_after: f64,
    neighbors: Vec<NeighborEffect>,
}

pub(super) async fn whatif_finetune(
    State(state): State<Arc<AppState>>,
    Id(id): Id<usize>,
    Body(req): Body<FinetuneRequest>,
) -> Reply<FinetuneReply> {
    blocking(move || {
        let (_, s, _) = state.sample(id)?;
        let profile = standardized_profile(&state, s)?;
        let filter_ids = select_filters(&profile, req.mode, req.count, req.seed)?;
        let step = FinetuneStep { filter_ids: filter_ids.clone(), step_size: req.step_size, mode: req.mode, allow_over_cap: req.allow_over_cap };
        let outcome = targeted_finetune(&state.model, &s.image, s.label, &step)?;
        let index = state.holdout_index()?;
        let target = if index.position(id).is_some() { QueryTarget::Sample(id) } else { QueryTarget::Profile(profile) };
        let found = index.knn(&NeighborQuery { target, k: req.neighbors, layer_range: None, pool: Pool::MisclassifiedOnly })?;
        let mut neighbors = Vec::with_capacity(found.neighbors.len());
        for n in found.neighbors {
            let (_, ns, before) = state.sample(n.sample_id)?;
            let after = outcome.model.predict(&ns.image)?;
            neighbors.push(NeighborEffect {
                sample_id: n.sample_id,
                similarity: n.similarity,
                corrected: after.predicted == ns.label,
                delta_true: after.confidences[ns.label] - before.confidences[ns.label],
            });
        }
        Ok(FinetuneReply {
            filters: filter_ids,
            self_corrected: outcome.corrected,
            zero_gradient: outcome.zero_gradient,
            loss_before: outcome.loss_before,
            loss_after: outcome.loss_after,
            neighbors,
        })
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct PasteRequest {
    source_id: usize,
    source_rect: Rect,
    /// Top-left `[row, column]` of the pasted region in the target image.
    dest_xy: [usize; 2],
}

/// Copies `rect` of `source` (all channels) into `target` with its corner at `dest`.
fn paste(target: &Tensor, source: &Tensor, rect: &Rect, dest: [usize; 2]) -> Result<Tensor, ApiError> {
    let (&[c, h, w], &[sc, sh, sw]) = (target.shape(), source.shape()) else {
        return Err(ApiError::bad_request("images must be [C, H, W]"));
    };
    if c != sc {
        return Err(ApiError::bad_request("source and target differ in channel count"));
    }
    if !rect.fits(sh, sw) {
        return Err(ApiError::bad_request(format!("source_rect {rect:?} does not fit a {sh}×{sw} image")));
    }
    let placed = Rect { top: dest[0], left: dest[1], ..*rect };
    if !placed.fits(h, w) {
        return Err(ApiError::bad_request(format!("pasted region at {dest:?} leaves the {h}×{w} image")));
    }
    let mut out = target.clone();
    let src = source.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for i in 0..rect.height {
            for j in 0..rect.width {
                dst[(ch * h + dest[0] + i) * w + dest[1] + j] = src[(ch * sh + rect.top + i) * sw + rect.left + j];
            }
        }
    }
    Ok(out)
}

pub(super) async fn whatif_paste(
    State(state): State<Arc<AppState>>,
    Id(id): Id<usize>,
    Body(req): Body<PasteRequest>,
) -> Reply<Effect> {
    blocking(move || {
        let (_, s, before) = state.sample(id)?;
        let (_, src, _) = state.sample(req.source_id)?;
        let image = paste(&s.image, &src.image, &req.source_rect, req.dest_xy)?;
        Ok(Effect::new(s, before, state.model.predict(&image)?))
    })
    .await
}
