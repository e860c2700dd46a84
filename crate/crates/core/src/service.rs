//! HTTP/JSON front end over a frozen model.
//!
//! | route                   | response                                  |
//! |-------------------------|-------------------------------------------|
//! | `GET /health`           | `{"status":"ok","model":{...}}`           |
//! | `POST /infer`           | [`InferenceResponse`], 400 `{"error"}`    |
//! | `GET /examples`         | test-split ids with their queries         |
//! | `GET /examples/{id}/image` | PNG bytes                              |

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::inference::{decode_base64_image, infer, InferenceRequest, InferenceResponse};
use crate::model::Model;
use crate::shapegen::{DatasetManifest, Split};
use crate::trainer::CheckpointMetadata;

pub struct AppState {
    pub model: Model<f32>,
    pub metadata: CheckpointMetadata,
    pub dataset: Option<DatasetManifest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ExampleEntry {
    pub id: String,
    pub query: String,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(e: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, e.to_string())
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, msg.into())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/infer", post(infer_handler))
        .route("/examples", get(examples))
        .route("/examples/{id}/image", get(example_image))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    let cfg = &state.model.config;
    Json(json!({
        "status": "ok",
        "model": {
            "image_size": cfg.image_size,
            "feature_stride": cfg.backbone.feature_stride(),
            "anchors": state.model.grid.len(),
            "max_proposals": cfg.rpn.proposals.max_proposals,
            "epoch": state.metadata.epoch,
            "seed": state.metadata.seed,
        }
    }))
}

fn test_record<'a>(state: &'a AppState, id: &str) -> Result<&'a crate::shapegen::ManifestRecord, ApiError> {
    let ds = state
        .dataset
        .as_ref()
        .ok_or_else(|| not_found("no dataset loaded"))?;
    let index: usize = id.parse().map_err(|_| not_found(format!("unknown example id `{id}`")))?;
    ds.records
        .get(index)
        .filter(|r| r.split == Split::Test)
        .ok_or_else(|| not_found(format!("unknown example id `{id}`")))
}

async fn infer_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<InferenceResponse>, ApiError> {
    let req: InferenceRequest = serde_json::from_slice(&body).map_err(bad_request)?;
    let cfg = req.config().map_err(bad_request)?;
    let img = match (&req.image, &req.image_id) {
        (Some(data), None) => decode_base64_image(data).map_err(bad_request)?,
        (None, Some(id)) => {
            let rec = test_record(&state, id)?;
            let ds = state.dataset.as_ref().expect("checked by test_record");
            ds.load_image(rec)
                .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        }
        _ => return Err(bad_request("exactly one of `image` and `image_id` is required")),
    };
    let query = req.query.clone();
    let resp = tokio::task::spawn_blocking(move || infer(&state.model, &img, &query, &cfg))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(bad_request)?;
    Ok(Json(resp))
}

async fn examples(State(state): State<Arc<AppState>>) -> Result<Json<Vec<ExampleEntry>>, ApiError> {
    let ds = state
        .dataset
        .as_ref()
        .ok_or_else(|| not_found("no dataset loaded"))?;
    Ok(Json(
        ds.split(Split::Test)
            .map(|(i, r)| ExampleEntry {
                id: i.to_string(),
                query: r.query.clone(),
            })
            .collect(),
    ))
}

async fn example_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let rec = test_record(&state, &id)?;
    let path = state.dataset.as_ref().expect("checked by test_record").image_path(rec);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Bind `addr` and serve until Ctrl-C, letting in-flight requests finish.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("listening on http://{}", listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}
