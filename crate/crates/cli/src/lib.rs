//! HTTP API over a completed pipeline run.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;

use sitecast::pipeline::RunSnapshot;
use sitecast::{what_if, Error, WhatIfRequest};

/// Shared server state. Requests clone the current snapshot `Arc`, so a
/// promotion never disturbs in-flight requests.
#[derive(Clone, Default)]
pub struct AppState {
    current: Arc<RwLock<Option<Arc<RunSnapshot>>>>,
    output_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(snapshot: Option<RunSnapshot>) -> Self {
        Self {
            current: Arc::new(RwLock::new(snapshot.map(Arc::new))),
            output_dir: None,
        }
    }

    /// State that can reload `output_dir/current`.
    pub fn watching(output_dir: impl Into<PathBuf>) -> Self {
        let output_dir = output_dir.into();
        let snapshot = match RunSnapshot::load_current(&output_dir) {
            Ok(s) => Some(s),
            Err(e) => {
                tracing::warn!(error = %e, "starting without a run");
                None
            }
        };
        Self {
            output_dir: Some(output_dir),
            ..Self::new(snapshot)
        }
    }

    pub fn snapshot(&self) -> Option<Arc<RunSnapshot>> {
        self.current.read().expect("state lock poisoned").clone()
    }

    /// Atomically replaces the served run.
    pub fn promote(&self, snapshot: RunSnapshot) {
        *self.current.write().expect("state lock poisoned") = Some(Arc::new(snapshot));
    }

    /// Reloads whatever `output_dir/current` points at.
    pub fn reload(&self) -> sitecast::Result<String> {
        let dir = self
            .output_dir
            .as_ref()
            .ok_or_else(|| Error::NotReady("server was started without an output directory".into()))?;
        let snapshot = RunSnapshot::load_current(dir)?;
        let id = snapshot.run_id().to_string();
        self.promote(snapshot);
        Ok(id)
    }
}

/// JSON error body: `{error, message, extent?}`.
pub struct ApiError {
    status: StatusCode,
    error: String,
    message: String,
    extent: Option<sitecast::BoundingBox>,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            error: error.into(),
            message: message.into(),
            extent: None,
        }
    }

    fn from_core(e: Error, snapshot: Option<&RunSnapshot>) -> Self {
        let status = match &e {
            Error::Validation(_)
            | Error::DegenerateGeometry(_)
            | Error::PolarUnsupported { .. }
            | Error::OutOfExtent
            | Error::InsufficientCoverage { .. }
            | Error::DimensionMismatch { .. }
            | Error::NonFinite(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::NotReady(_) | Error::NotInitialized(_) | Error::Locked(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let extent = match e {
            Error::OutOfExtent | Error::InsufficientCoverage { .. } => snapshot.and_then(|s| s.raster_extent()),
            _ => None,
        };
        Self {
            status,
            error: e.name().into(),
            message: e.to_string(),
            extent,
        }
    }

    fn no_run() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "not_ready", "no completed run is loaded")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.error, "message": self.message });
        if let Some(extent) = self.extent {
            body["extent"] = serde_json::to_value(extent).expect("plain struct");
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn require(state: &AppState) -> Result<Arc<RunSnapshot>, ApiError> {
    state.snapshot().ok_or_else(ApiError::no_run)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/what-if", post(what_if_handler))
        .route("/runs/current", get(current_run))
        .route("/clusters", get(clusters))
        .route("/cells/{id}/forecast", get(cell_forecast))
        .with_state(state)
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    run_id: Option<String>,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok",
        run_id: state.snapshot().map(|s| s.run_id().to_string()),
    })
}

async fn what_if_handler(State(state): State<AppState>, body: Bytes) -> Response {
    let request: WhatIfRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()).into_response(),
    };
    let snapshot = match require(&state) {
        Ok(s) => s,
        Err(e) => return e.into_response(),
    };
    let result = tokio::task::spawn_blocking(move || {
        let r = what_if(&request, &snapshot);
        (r, snapshot)
    })
    .await;
    match result {
        Ok((Ok(resp), _)) => Json(resp).into_response(),
        Ok((Err(e), snapshot)) => ApiError::from_core(e, Some(&snapshot)).into_response(),
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()).into_response(),
    }
}

async fn current_run(State(state): State<AppState>) -> ApiResult<sitecast::PipelineRun> {
    Ok(Json(require(&state)?.run.clone()))
}

async fn clusters(State(state): State<AppState>) -> ApiResult<Vec<sitecast::pipeline::ClusterInfo>> {
    Ok(Json(require(&state)?.cluster_info()))
}

async fn cell_forecast(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<sitecast::pipeline::CellForecast> {
    let snapshot = require(&state)?;
    snapshot
        .forecasts
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no forecast for cell {id:?}")))
}
