//! JSON-over-HTTP routes.

use std::future::Future;
use std::io;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get};
use axum::{Json, Router};
use base64::Engine;
use mufm_core::extractor::{ExtractError, ExtractorConfig, ModelExtractor};
use mufm_core::imaging::{decode_image, preprocess, ImageRecord, ImagingError, PreprocessConfig};
use mufm_core::matcher::{MatchConfig, MatchError, MatchResult};
use mufm_core::MaskStatus;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::store::{GalleryStore, StoreError};

pub const GENERATION_HEADER: &str = "x-gallery-generation";

/// Turns encoded image bytes into an embedding.
pub struct ImageEmbedder {
    extractor: ModelExtractor,
    preprocess: PreprocessConfig,
}

impl ImageEmbedder {
    pub fn load(cfg: &ExtractorConfig, mut preprocess: PreprocessConfig) -> Result<Self, ExtractError> {
        let extractor = ModelExtractor::load(cfg)?;
        let (h, w, _) = extractor.input_dims();
        if h != w {
            return Err(ExtractError::ShapeMismatch(format!("model input {h}x{w} is not square")));
        }
        preprocess.target_size = h as u32;
        Ok(Self { extractor, preprocess })
    }

    pub fn embed(&self, bytes: &[u8]) -> Result<Vec<f64>, ApiError> {
        let image = decode_image(bytes)?;
        let record = ImageRecord::new("request", "request", MaskStatus::Masked, image)?;
        let tensor = preprocess(&record, &self.preprocess)?;
        let values = self.extractor.extract(&tensor).map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok(values.into_iter().map(f64::from).collect())
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<GalleryStore>,
    pub embedder: Option<Arc<ImageEmbedder>>,
    pub defaults: MatchConfig,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    NoModel,
    Internal(String),
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::DimensionMismatch { .. }
            | StoreError::EmptySubject
            | StoreError::InvalidVector(_)
            | StoreError::Match(MatchError::InvalidConfig(_)) => ApiError::BadRequest(e.to_string()),
            StoreError::Duplicate(_) => ApiError::Conflict(e.to_string()),
            StoreError::NotFound(_) | StoreError::EmptyGallery => ApiError::NotFound(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<ImagingError> for ApiError {
    fn from(e: ImagingError) -> Self {
        ApiError::BadRequest(format!("image: {e}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::NoModel => (StatusCode::SERVICE_UNAVAILABLE, "image input needs a model; start with --model".into()),
            ApiError::Internal(m) => {
                log::error!("{m}");
                (StatusCode::INTERNAL_SERVER_ERROR, m)
            }
        };
        (status, Json(serde_json::json!({ "error": message }))).into_response()
    }
}

/// Exactly one of `embedding` or `image` (base64) must be given.
#[derive(Debug, Deserialize)]
struct VectorInput {
    embedding: Option<Vec<f64>>,
    image: Option<String>,
}

impl VectorInput {
    async fn resolve(self, state: &AppState) -> Result<Vec<f64>, ApiError> {
        match (self.embedding, self.image) {
            (Some(v), None) => Ok(v),
            (None, Some(b64)) => {
                let embedder = state.embedder.clone().ok_or(ApiError::NoModel)?;
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64.as_bytes())
                    .map_err(|e| ApiError::BadRequest(format!("image is not valid base64: {e}")))?;
                tokio::task::spawn_blocking(move || embedder.embed(&bytes))
                    .await
                    .map_err(|e| ApiError::Internal(e.to_string()))?
            }
            _ => Err(ApiError::BadRequest("give exactly one of 'embedding' or 'image'".into())),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct EnrollRequest {
    subject: String,
    source_id: Option<String>,
    #[serde(flatten)]
    input: VectorInput,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnrollResponse {
    pub source_id: String,
    pub generation: u64,
}

#[derive(Debug, Deserialize)]
pub struct MatchRequest {
    k: Option<usize>,
    threshold: Option<f64>,
    probe_id: Option<String>,
    #[serde(flatten)]
    input: VectorInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResponse {
    pub generation: u64,
    #[serde(flatten)]
    pub result: MatchResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub source_id: String,
    pub subject: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub values: Option<Vec<f32>>,
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    #[serde(default)]
    vectors: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub generation: u64,
    pub size: usize,
}

async fn enroll(State(state): State<AppState>, Json(req): Json<EnrollRequest>) -> Result<Response, ApiError> {
    let values = req.input.resolve(&state).await?;
    let store = state.store.clone();
    let (source_id, generation) =
        tokio::task::spawn_blocking(move || store.enroll(&req.subject, &values, req.source_id.as_deref()))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(EnrollResponse { source_id, generation })).into_response())
}

async fn match_probe(State(state): State<AppState>, Json(req): Json<MatchRequest>) -> Result<Json<MatchResponse>, ApiError> {
    let cfg = MatchConfig {
        shortlist_k: req.k.unwrap_or(state.defaults.shortlist_k),
        threshold: req.threshold.unwrap_or(state.defaults.threshold),
        ..state.defaults
    };
    cfg.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let probe_id = req.probe_id.unwrap_or_else(|| "probe".into());
    let values = req.input.resolve(&state).await?;
    let snapshot = state.store.snapshot();
    let result = snapshot.match_vector(&probe_id, &values, &cfg)?;
    Ok(Json(MatchResponse { generation: snapshot.generation, result }))
}

async fn list(State(state): State<AppState>, Query(q): Query<ListQuery>) -> Response {
    let snapshot = state.store.snapshot();
    let entries: Vec<GalleryEntry> = snapshot
        .entries
        .iter()
        .map(|e| GalleryEntry {
            source_id: e.source_id.clone(),
            subject: e.subject.clone().unwrap_or_default(),
            values: q.vectors.then(|| e.values.clone()),
        })
        .collect();
    ([(GENERATION_HEADER, snapshot.generation.to_string())], Json(entries)).into_response()
}

async fn remove(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Health>, ApiError> {
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || store.remove(&id))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(healthz(State(state)).await)
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    let snapshot = state.store.snapshot();
    Json(Health { generation: snapshot.generation, size: snapshot.len() })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/gallery", get(list).post(enroll))
        .route("/gallery/{id}", delete(remove))
        .route("/match", axum::routing::post(match_probe))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(listener: TcpListener, state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
