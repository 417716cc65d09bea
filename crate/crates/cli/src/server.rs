//! JSON over HTTP in front of [`EditService`].

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::Deserialize;
use serde_json::json;
use sgedit::session::EditService;
use sgedit::{EditOp, Error, SceneGraph};

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            Error::InvalidGraph(_) | Error::InvalidEdit(_) | Error::Json(_) | Error::Image(_) | Error::Config(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.0.to_string() });
        if let Error::InvalidGraph(v) = &self.0 {
            body["violations"] = json!(v);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Run blocking model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> sgedit::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::Unavailable(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub sample_id: Option<String>,
    /// Base64 PNG, together with `graph`.
    pub image_png: Option<String>,
    pub graph: Option<serde_json::Value>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Default, Deserialize)]
pub struct GenerateRequest {
    #[serde(default)]
    pub reseed: bool,
}

pub fn router(svc: Arc<EditService>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/edits", post(post_edit))
        .route("/api/sessions/{id}/generate", post(generate))
        .route("/api/images/{file}", get(image))
        .route("/api/samples", get(samples))
        .route("/api/vocab", get(vocab))
        .with_state(svc)
}

async fn create_session(State(svc): State<Arc<EditService>>, Json(req): Json<CreateSession>) -> ApiResult<Response> {
    let view = match (req.sample_id, req.image_png, req.graph) {
        (Some(id), None, None) => blocking(move || svc.create_from_sample(&id, req.seed)).await?,
        (None, Some(png), Some(graph)) => {
            let png = base64::engine::general_purpose::STANDARD
                .decode(png.as_bytes())
                .map_err(|e| Error::Config(format!("image_png is not base64: {e}")))?;
            let graph: SceneGraph = serde_json::from_value(graph).map_err(Error::Json)?;
            blocking(move || svc.create_from_upload(&png, graph, req.seed)).await?
        }
        _ => {
            return Err(Error::Config("give either sample_id or both image_png and graph".into()).into());
        }
    };
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(svc): State<Arc<EditService>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(svc.get(&id)?).into_response())
}

async fn post_edit(
    State(svc): State<Arc<EditService>>,
    Path(id): Path<String>,
    Json(body): Json<serde_json::Value>,
) -> ApiResult<Response> {
    let op: EditOp = serde_json::from_value(body).map_err(|e| Error::InvalidEdit(e.to_string()))?;
    Ok(Json(svc.post_edit(&id, op)?).into_response())
}

async fn generate(
    State(svc): State<Arc<EditService>>,
    Path(id): Path<String>,
    body: Option<Json<GenerateRequest>>,
) -> ApiResult<Response> {
    let reseed = body.map(|b| b.0.reseed).unwrap_or(false);
    let view = blocking(move || svc.generate(&id, reseed)).await?;
    Ok(Json(view).into_response())
}

async fn image(State(svc): State<Arc<EditService>>, Path(file): Path<String>) -> ApiResult<Response> {
    let id = file
        .strip_suffix(".png")
        .ok_or_else(|| Error::NotFound(format!("image {file}")))?;
    let png = svc.image(id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png.as_ref().clone()).into_response())
}

async fn samples(State(svc): State<Arc<EditService>>, Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let split = q.get("split").map(String::as_str).unwrap_or("test");
    if !["train", "val", "test"].contains(&split) {
        return Err(Error::Config(format!("unknown split {split:?}")).into());
    }
    Ok(Json(svc.samples(split)?).into_response())
}

async fn vocab(State(svc): State<Arc<EditService>>) -> Json<sgedit::Vocab> {
    Json(svc.vocab().clone())
}
