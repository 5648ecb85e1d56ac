//! C interface to the paramsal toolkit.
//!
//! Models, profile statistics and profile indexes are opaque handles created by a `*_load`
//! function and released with the matching `*_free`. Every other function returns a
//! [`PsalStatus`]; on failure a description is available from [`psal_last_error_message`]
//! on the same thread. Output buffers are allocated by the caller and their lengths are
//! checked before anything is written.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use paramsal::input_saliency::{input_saliency_map, postprocess_map, BoostSpec, DEFAULT_PERCENTILE};
use paramsal::nn::{Checkpoint, Model};
use paramsal::profile_index::{NeighborQuery, Pool, ProfileIndex, QueryTarget};
use paramsal::saliency::{filter_profile, standardize, ProfileStats};
use paramsal::tensor::Tensor;
use paramsal::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsalStatus {
    Ok = 0,
    InvalidArgument = 1,
    Shape = 2,
    Format = 3,
    Empty = 4,
    NonFinite = 5,
    MissingArtifact = 6,
    Io = 7,
    NullPointer = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Neighbor pool of [`psal_index_knn`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsalPool {
    All = 0,
    Misclassified = 1,
    Correct = 2,
}

/// Static facts about a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PsalModelInfo {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub filter_count: usize,
    pub conv_layer_count: usize,
}

/// A trained model loaded from a checkpoint.
pub struct PsalModel(Model);

/// Per-filter saliency statistics of a reference set.
pub struct PsalStats(ProfileStats);

/// Exact cosine-similarity index over standardized profiles.
pub struct PsalIndex(ProfileIndex);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure {
    status: PsalStatus,
    message: String,
}

impl Failure {
    fn new(status: PsalStatus, message: impl Into<String>) -> Self {
        Failure { status, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) => PsalStatus::InvalidArgument,
            Error::Shape { .. } => PsalStatus::Shape,
            Error::Format(_) | Error::Json(_) => PsalStatus::Format,
            Error::Empty(_) => PsalStatus::Empty,
            Error::NonFinite { .. } => PsalStatus::NonFinite,
            Error::MissingArtifact { .. } => PsalStatus::MissingArtifact,
            Error::Io(_) => PsalStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> PsalStatus {
    let failure = match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            return PsalStatus::Ok;
        }
        Ok(Err(f)) => f,
        Err(panic) => {
            let text = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            Failure::new(PsalStatus::Panic, format!("internal panic: {text}"))
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = failure.message);
    failure.status
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| Failure::new(PsalStatus::NullPointer, format!("{what} is null")))
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(Failure::new(PsalStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, needed: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(Failure::new(PsalStatus::NullPointer, format!("{what} is null")));
    }
    if len < needed {
        return Err(Failure::new(PsalStatus::BufferTooSmall, format!("{what} holds {len}, needs {needed}")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, needed))
}

unsafe fn write<T>(ptr: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(Failure::new(PsalStatus::NullPointer, format!("{what} is null")));
    }
    ptr.write(value);
    Ok(())
}

unsafe fn path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(Failure::new(PsalStatus::NullPointer, "path is null"));
    }
    let text = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::new(PsalStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(text))
}

unsafe fn image(model: &Model, ptr: *const f64, len: usize) -> Result<Tensor, Failure> {
    let shape = model.spec().input_shape;
    let expected: usize = shape.iter().product();
    if len != expected {
        return Err(Failure::new(PsalStatus::Shape, format!("image has {len} values, model expects {expected} ({shape:?})")));
    }
    Ok(Tensor::new(shape.to_vec(), input(ptr, len, "image")?.to_vec())?)
}

fn check_label(model: &Model, label: usize) -> Result<(), Failure> {
    if label >= model.num_classes() {
        return Err(Failure::new(PsalStatus::InvalidArgument, format!("label {label} outside 0..{}", model.num_classes())));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn psal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated, truncated to
/// `capacity`) and returns its full length in bytes, excluding the terminator. The message
/// is empty after a successful call.
///
/// # Safety
/// `buf` must be null or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn psal_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psal_model_load(path_utf8: *const c_char, out: *mut *mut PsalModel) -> PsalStatus {
    guard(|| {
        let model = Checkpoint::load(&path(path_utf8)?)?.model;
        write(out, Box::into_raw(Box::new(PsalModel(model))), "out")
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`psal_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn psal_model_free(model: *mut PsalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psal_model_info(model: *const PsalModel, out: *mut PsalModelInfo) -> PsalStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let [channels, height, width] = m.spec().input_shape;
        let info = PsalModelInfo {
            channels,
            height,
            width,
            num_classes: m.num_classes(),
            filter_count: m.registry().filter_count(),
            conv_layer_count: m.registry().layers().len(),
        };
        write(out, info, "out")
    })
}

/// Classifies one `[C, H, W]` image given in row-major order. Softmax confidences go to
/// `confidences` (at least `num_classes` entries) and the arg-max class to `*predicted`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn psal_model_predict(
    model: *const PsalModel,
    pixels: *const f64,
    pixel_count: usize,
    confidences: *mut f64,
    confidence_capacity: usize,
    predicted: *mut usize,
) -> PsalStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let p = m.predict(&image(m, pixels, pixel_count)?)?;
        output(confidences, confidence_capacity, p.confidences.len(), "confidences")?.copy_from_slice(&p.confidences);
        write(predicted, p.predicted, "predicted")
    })
}

/// Loads profile statistics written by `paramsal stats`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psal_stats_load(path_utf8: *const c_char, out: *mut *mut PsalStats) -> PsalStatus {
    guard(|| {
        let stats = ProfileStats::load(&path(path_utf8)?)?;
        write(out, Box::into_raw(Box::new(PsalStats(stats))), "out")
    })
}

/// Releases a statistics handle; null is ignored.
///
/// # Safety
/// `stats` must be null or a handle from [`psal_stats_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn psal_stats_free(stats: *mut PsalStats) {
    if !stats.is_null() {
        drop(Box::from_raw(stats));
    }
}

/// Filter-wise saliency profile of one image under `label`, one value per filter. With a
/// null `stats` the raw profile is returned, otherwise its standardization.
///
/// # Safety
/// `stats` may be null; other pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn psal_filter_profile(
    model: *const PsalModel,
    stats: *const PsalStats,
    pixels: *const f64,
    pixel_count: usize,
    label: usize,
    profile: *mut f64,
    profile_capacity: usize,
) -> PsalStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        check_label(m, label)?;
        let raw = filter_profile(m, &image(m, pixels, pixel_count)?, label)?;
        let values = match stats.as_ref() {
            Some(s) => standardize(&raw, &s.0)?,
            None => raw,
        };
        output(profile, profile_capacity, values.len(), "profile")?.copy_from_slice(&values);
        Ok(())
    })
}

/// Input-space saliency map (`H × W`, row-major) that moves the image's standardized
/// profile toward a copy with its `top_filters` most salient filters multiplied by
/// `boost`. With `postprocess` the map is thresholded and blurred.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn psal_input_saliency(
    model: *const PsalModel,
    stats: *const PsalStats,
    pixels: *const f64,
    pixel_count: usize,
    label: usize,
    top_filters: usize,
    boost: f64,
    postprocess: bool,
    map: *mut f64,
    map_capacity: usize,
) -> PsalStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let s = &handle(stats, "stats")?.0;
        check_label(m, label)?;
        let spec = BoostSpec { filters: None, top_filters, boost };
        let mut result = input_saliency_map(m, &image(m, pixels, pixel_count)?, label, s, &spec)?;
        if postprocess {
            result = postprocess_map(&result, DEFAULT_PERCENTILE, true)?;
        }
        output(map, map_capacity, result.values.len(), "map")?.copy_from_slice(&result.values);
        Ok(())
    })
}

/// Loads a profile index written by `paramsal profile`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn psal_index_load(path_utf8: *const c_char, out: *mut *mut PsalIndex) -> PsalStatus {
    guard(|| {
        let index = ProfileIndex::load(&path(path_utf8)?)?;
        write(out, Box::into_raw(Box::new(PsalIndex(index))), "out")
    })
}

/// Releases an index handle; null is ignored.
///
/// # Safety
/// `index` must be null or a handle from [`psal_index_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn psal_index_free(index: *mut PsalIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of stored profiles, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn psal_index_len(index: *const PsalIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.len())
}

/// The `k` stored samples most similar to `sample_id` (excluding itself) within `pool`,
/// optionally restricted to conv layers `first_layer..=last_layer`. Ids and similarities
/// are written in rank order and their number to `*count`, which is below `k` when the
/// pool is smaller.
///
/// # Safety
/// Pointers must be valid for `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn psal_index_knn(
    index: *const PsalIndex,
    sample_id: usize,
    k: usize,
    pool: PsalPool,
    restrict_layers: bool,
    first_layer: usize,
    last_layer: usize,
    ids: *mut usize,
    similarities: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> PsalStatus {
    guard(|| {
        let idx = &handle(index, "index")?.0;
        let pool = match pool {
            PsalPool::All => Pool::All,
            PsalPool::Misclassified => Pool::MisclassifiedOnly,
            PsalPool::Correct => Pool::CorrectOnly,
        };
        let layer_range = restrict_layers.then_some((first_layer, last_layer));
        let found = idx.knn(&NeighborQuery { target: QueryTarget::Sample(sample_id), k, layer_range, pool })?;
        let n = found.neighbors.len();
        let ids = output(ids, capacity, n, "ids")?;
        let sims = output(similarities, capacity, n, "similarities")?;
        for (i, nb) in found.neighbors.iter().enumerate() {
            ids[i] = nb.sample_id;
            sims[i] = nb.similarity;
        }
        write(count, n, "count")
    })
}
