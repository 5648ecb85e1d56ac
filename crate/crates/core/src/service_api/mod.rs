//! HTTP front end over a loaded checkpoint, dataset, statistics and profile index.
//!
//! All routes live under `/api/v1`, take and return JSON, and report failures as
//! `{"code", "message"}` bodies. The served model is never modified: what-if requests
//! work on private copies and every response is a pure function of the request.

mod handlers;
mod png;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{prepare, Dataset, DatasetManifest, PreparedData, Sample};
use crate::error::{Error, Result};
use crate::input_saliency::PixelSaliencyMap;
use crate::nn::{Checkpoint, Model, Prediction};
use crate::profile_index::{Pool, ProfileIndex};
use crate::saliency::ProfileStats;

pub use png::{encode_heatmap_png, encode_image_png};

/// Artifact locations for [`AppState::open`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub stats: PathBuf,
    /// Profile index manifest; built from the validation split when absent.
    #[serde(default)]
    pub index: Option<PathBuf>,
    #[serde(default = "default_port")]
    pub port: u16,
}

fn default_port() -> u16 {
    8080
}

/// Cache key of an input-saliency response: sample, filter set, boost bits, post-processing.
type MapKey = (usize, Vec<usize>, u64, bool);

/// Immutable serving state plus pure caches.
pub struct AppState {
    model: Model,
    data: PreparedData,
    stats: ProfileStats,
    index: ProfileIndex,
    predictions: HashMap<&'static str, Vec<Prediction>>,
    locations: HashMap<usize, (&'static str, usize)>,
    holdout_index: OnceLock<std::result::Result<ProfileIndex, String>>,
    maps: Mutex<HashMap<MapKey, Arc<Mutex<Option<Arc<PixelSaliencyMap>>>>>>,
}

const SPLITS: [&str; 3] = ["train", "val", "holdout"];

impl AppState {
    pub fn new(model: Model, data: PreparedData, stats: ProfileStats, index: ProfileIndex) -> Result<Self> {
        if stats.len() != model.registry().filter_count() || index.width() != stats.len() {
            return Err(Error::invalid("statistics, index and model disagree on the filter count"));
        }
        let mut predictions = HashMap::new();
        let mut locations = HashMap::new();
        for name in SPLITS {
            let ds = data.split_by_name(name)?;
            // single-sample passes, so what-if predictions compare bit-for-bit
            let preds = ds.samples.par_iter().map(|s| model.predict(&s.image)).collect::<Result<Vec<_>>>()?;
            predictions.insert(name, preds);
            for (pos, s) in ds.samples.iter().enumerate() {
                if locations.insert(s.id, (name, pos)).is_some() {
                    return Err(Error::invalid(format!("sample id {} appears in more than one split", s.id)));
                }
            }
        }
        Ok(AppState {
            model,
            data,
            stats,
            index,
            predictions,
            locations,
            holdout_index: OnceLock::new(),
            maps: Mutex::new(HashMap::new()),
        })
    }

    /// Loads every artifact named in `config`.
    pub fn open(config: &ServiceConfig) -> Result<Self> {
        let model = Checkpoint::load(&config.checkpoint)?.model;
        let data = prepare(&DatasetManifest::load(&config.dataset)?)?;
        let stats = ProfileStats::load(&config.stats)?;
        let index = match &config.index {
            Some(path) => ProfileIndex::load(path)?,
            None => ProfileIndex::from_dataset(&model, &data.val, &stats, Pool::All)?,
        };
        Self::new(model, data, stats, index)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn split(&self, name: &str) -> Result<&Dataset> {
        self.data.split_by_name(name)
    }

    fn sample(&self, id: usize) -> std::result::Result<(&'static str, &Sample, &Prediction), ApiError> {
        let &(split, pos) = self.locations.get(&id).ok_or_else(|| ApiError::not_found(format!("no sample {id}")))?;
        let ds = self.split(split)?;
        Ok((split, &ds.samples[pos], &self.predictions[split][pos]))
    }

    /// Misclassified holdout samples, the neighbor pool of what-if fine-tuning.
    fn holdout_index(&self) -> Result<&ProfileIndex> {
        self.holdout_index
            .get_or_init(|| {
                ProfileIndex::from_dataset(&self.model, &self.data.holdout, &self.stats, Pool::MisclassifiedOnly)
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| Error::Empty(e.clone()))
    }

    /// The cached map for `key`, computing it at most once per key.
    fn cached_map(
        &self,
        key: MapKey,
        compute: impl FnOnce() -> Result<PixelSaliencyMap>,
    ) -> Result<Arc<PixelSaliencyMap>> {
        let slot = self.maps.lock().expect("cache lock").entry(key).or_default().clone();
        let mut guard = slot.lock().expect("cache slot lock");
        if let Some(map) = guard.as_ref() {
            return Ok(map.clone());
        }
        let map = Arc::new(compute()?);
        *guard = Some(map.clone());
        Ok(map)
    }
}

/// JSON error body with its HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, code: "invalid_argument", message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, code: "not_found", message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::InvalidArgument(_) | Error::Shape { .. } | Error::Format(_) => {
                (StatusCode::BAD_REQUEST, "invalid_argument")
            }
            Error::Empty(_) => (StatusCode::UNPROCESSABLE_ENTITY, "empty"),
            Error::NonFinite { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "numerical"),
            Error::MissingArtifact { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "missing_artifact"),
            Error::Io(_) | Error::Json(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError { status, code, message: e.to_string() }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(r: PathRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code, message: &self.message };
        (self.status, axum::Json(body)).into_response()
    }
}

/// Every route of the API.
pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/model", get(handlers::model))
        .route("/samples", get(handlers::list_samples))
        .route("/samples/{id}", get(handlers::sample))
        .route("/samples/{id}/profile", get(handlers::profile))
        .route("/samples/{id}/neighbors", get(handlers::neighbors))
        .route("/samples/{id}/input_saliency", post(handlers::input_saliency))
        .route("/samples/{id}/whatif/mask", post(handlers::whatif_mask))
        .route("/samples/{id}/whatif/prune", post(handlers::whatif_prune))
        .route("/samples/{id}/whatif/finetune", post(handlers::whatif_finetune))
        .route("/samples/{id}/whatif/paste", post(handlers::whatif_paste))
        .with_state(state);
    Router::new().nest("/api/v1", api).fallback(|| async { ApiError::not_found("no such route") })
}

/// Serves the API on `addr` until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving /api/v1 on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
