use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ncc_core::model::CompletionModel;
use ncc_core::providers::ApiTable;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::session::{complete, CompletionRequest, RequestError};

/// Shared, read-only state of a running service.
pub struct AppState {
    pub model: CompletionModel,
    pub model_id: String,
    pub table: ApiTable,
    pub top_k: usize,
}

impl AppState {
    pub fn new(model: CompletionModel, table: ApiTable, top_k: usize) -> Self {
        Self {
            model_id: model.model_id(),
            model,
            table,
            top_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: String,
    pub params: usize,
    pub size_bytes: usize,
    pub config: String,
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_id: state.model_id.clone(),
        params: state.model.num_params(),
        size_bytes: state.model.size_bytes(),
        config: state.model.config().describe(),
    })
}

async fn complete_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let request: CompletionRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let result = tokio::task::spawn_blocking(move || {
        complete(&state.model, &state.model_id, &state.table, &request, state.top_k)
    })
    .await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(RequestError::Invalid(m))) => error(StatusCode::BAD_REQUEST, m),
        Ok(Err(RequestError::Internal(m))) => error(StatusCode::INTERNAL_SERVER_ERROR, m),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/complete", post(complete_handler))
        .with_state(state)
}
