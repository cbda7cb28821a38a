//! HTTP/JSON API over the moderation queue.
//!
//! | Method | Path                      | Body / query                         | Response            |
//! |--------|---------------------------|--------------------------------------|---------------------|
//! | POST   | `/memes`                  | multipart: `image`, `text`, `id`?    | `QueueItem`         |
//! | GET    | `/queue/next`             | `?moderator=<id>` or `x-moderator-id`| `QueueItem` or 204  |
//! | POST   | `/decisions`              | `DecisionRequest` JSON               | `Ack`               |
//! | GET    | `/items/{id}`             |                                      | `QueueItem`         |
//! | GET    | `/items/{id}/image`       |                                      | image bytes         |
//! | GET    | `/stats`                  |                                      | `Stats`             |
//!
//! Errors are `{"error": <code>, "message": <text>}` with 400, 404, 409,
//! 422 or 500.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use memeguard_core::dataset::MemeInput;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::queue::{DecisionRequest, ModerationService, ServiceError};

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<ModerationService>,
    /// Uploaded images are stored here, one file per meme id.
    pub blob_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub struct ApiError(StatusCode, &'static str, String);

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, "bad_request", message.into())
    }

    fn internal(message: impl Into<String>) -> Self {
        Self(StatusCode::INTERNAL_SERVER_ERROR, "internal", message.into())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let (status, code) = match &e {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::Rejected(_) => (StatusCode::UNPROCESSABLE_ENTITY, "rejected"),
            ServiceError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        Self(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.1.to_string(),
            message: self.2,
        };
        (self.0, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/memes", post(post_meme))
        .route("/queue/next", get(next_item))
        .route("/decisions", post(post_decision))
        .route("/items/{id}", get(get_item))
        .route("/items/{id}/image", get(get_image))
        .route("/stats", get(get_stats))
        .layer(DefaultBodyLimit::max(20 * 1024 * 1024))
        .with_state(state)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.')
}

async fn post_meme(State(state): State<AppState>, mut multipart: Multipart) -> ApiResult<Json<serde_json::Value>> {
    let mut image: Option<Vec<u8>> = None;
    let mut text = String::new();
    let mut id: Option<String> = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        match name.as_str() {
            "image" => image = Some(bytes.to_vec()),
            "text" => text = String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::bad_request("text is not UTF-8"))?,
            "id" => id = Some(String::from_utf8_lossy(&bytes).trim().to_string()),
            _ => {}
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing image field"))?;
    let id = match id {
        Some(id) if valid_id(&id) => id,
        Some(id) => return Err(ApiError::bad_request(format!("invalid id {id:?}"))),
        None => {
            let mut h = Sha256::new();
            h.update(&image);
            h.update([0]);
            h.update(text.as_bytes());
            format!("meme-{}", &hex::encode(h.finalize())[..16])
        }
    };
    let path = state.blob_dir.join(format!("{id}.img"));
    if !path.exists() {
        let tmp = state.blob_dir.join(format!(".{id}.tmp"));
        std::fs::write(&tmp, &image)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| ApiError::internal(e.to_string()))?;
    }
    let meme = MemeInput {
        id,
        image_ref: path,
        overlay_text: text,
    };
    let service = state.service.clone();
    let item = blocking(move || service.enqueue(meme)).await?;
    Ok(Json(serde_json::to_value(item).expect("item serializes")))
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    moderator: Option<String>,
}

async fn next_item(
    State(state): State<AppState>,
    Query(q): Query<NextQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let moderator = q
        .moderator
        .or_else(|| {
            headers
                .get("x-moderator-id")
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        })
        .filter(|m| !m.is_empty())
        .ok_or_else(|| ApiError::bad_request("moderator id required"))?;
    let service = state.service.clone();
    match blocking(move || service.next_item(&moderator)).await? {
        Some(item) => Ok(Json(item).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn post_decision(State(state): State<AppState>, body: Result<Json<DecisionRequest>, axum::extract::rejection::JsonRejection>) -> ApiResult<Response> {
    let Json(request) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let service = state.service.clone();
    let ack = blocking(move || service.submit_decision(request)).await?;
    Ok(Json(ack).into_response())
}

async fn get_item(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let item = state.service.item(&id).ok_or(ServiceError::NotFound(id))?;
    Ok(Json(item).into_response())
}

fn sniff_content_type(bytes: &[u8]) -> &'static str {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => "image/png",
        [0xff, 0xd8, 0xff, ..] => "image/jpeg",
        [b'G', b'I', b'F', b'8', ..] => "image/gif",
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn get_image(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let item = state.service.item(&id).ok_or(ServiceError::NotFound(id))?;
    let bytes = tokio::fs::read(&item.meme.image_ref)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, sniff_content_type(&bytes))], bytes).into_response())
}

async fn get_stats(State(state): State<AppState>) -> Json<crate::queue::Stats> {
    Json(state.service.stats())
}
