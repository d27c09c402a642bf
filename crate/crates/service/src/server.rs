//! HTTP API over a root directory of sessions. Reads are views of the flat
//! files; writes go through [`crate::curation::apply_edit`].

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use skinmap_core::detect::{detections_from_json, Detection2D};
use skinmap_core::session::SessionLayout;

use crate::curation::{apply_edit, CurationEdit, EditAction};
use crate::manifest::{SessionManifest, StageFlags};
use crate::ServiceError;

#[derive(Debug, Clone)]
pub struct AppState {
    pub root: PathBuf,
}

#[derive(Debug)]
pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::MissingPrerequisite { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub subject_id: String,
    pub captured_at: String,
    pub stages: StageFlags,
    pub image_count: usize,
}

/// Body of a detection PATCH. `det_id` is required when the URL names only the image.
#[derive(Debug, Clone, Deserialize)]
pub struct PatchBody {
    #[serde(default)]
    pub det_id: Option<u32>,
    pub action: EditAction,
    #[serde(default)]
    pub notes: Option<String>,
}

pub fn router(root: impl Into<PathBuf>) -> Router {
    let state = Arc::new(AppState { root: root.into() });
    Router::new()
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/{id}/manifest", get(get_manifest))
        .route("/api/sessions/{id}/images/{image_id}", get(get_image))
        .route("/api/sessions/{id}/mesh", get(get_mesh))
        .route("/api/sessions/{id}/texture", get(get_texture))
        .route(
            "/api/sessions/{id}/detections/{image_id}",
            get(get_image_detections).patch(patch_image_detection),
        )
        .route(
            "/api/sessions/{id}/detections/{image_id}/{det_id}",
            get(get_detection).patch(patch_detection),
        )
        .route("/api/sessions/{id}/lesions", get(get_lesions))
        .route("/api/sessions/{id}/tracks", get(get_tracks))
        .with_state(state)
}

pub async fn serve(root: PathBuf, bind: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(root = %root.display(), addr = %listener.local_addr()?, "serving sessions");
    axum::serve(listener, router(root))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Accepts a single plain path component, so ids cannot escape the root.
fn component(name: &str) -> Result<&str, ServiceError> {
    let mut parts = Path::new(name).components();
    match (parts.next(), parts.next()) {
        (Some(Component::Normal(_)), None) if !name.contains(['/', '\\']) => Ok(name),
        _ => Err(ServiceError::NotFound(format!("`{name}`"))),
    }
}

fn session(state: &AppState, id: &str) -> Result<SessionLayout, ServiceError> {
    let dir = state.root.join(component(id)?);
    if !dir.join("manifest.json").is_file() {
        return Err(ServiceError::NotFound(format!("session `{id}`")));
    }
    Ok(SessionLayout::new(dir))
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::Config(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>, ServiceError> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ServiceError::NotFound(what.to_string())),
        Err(e) => Err(skinmap_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()),
    }
}

fn bytes_response(bytes: Vec<u8>, content_type: &'static str) -> Response {
    ([(header::CONTENT_TYPE, content_type)], Body::from(bytes)).into_response()
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<SessionSummary>>> {
    blocking(move || {
        let mut out = Vec::new();
        let entries = match std::fs::read_dir(&state.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => {
                return Err(skinmap_core::Error::Io {
                    path: state.root.clone(),
                    source: e,
                }
                .into())
            }
        };
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let layout = SessionLayout::new(&dir);
            let m = SessionManifest::load(&layout)?;
            out.push(SessionSummary {
                session_id: layout.id(),
                subject_id: m.subject_id,
                captured_at: m.captured_at,
                stages: m.stages,
                image_count: m.images.len(),
            });
        }
        Ok(out)
    })
    .await
    .map(Json)
}

async fn get_manifest(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionManifest>> {
    blocking(move || {
        let layout = session(&state, &id)?;
        let mut m = SessionManifest::load(&layout)?;
        m.reconcile(&layout);
        Ok(m)
    })
    .await
    .map(Json)
}

async fn get_image(
    State(state): State<Arc<AppState>>,
    UrlPath((id, image_id)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    blocking(move || {
        let layout = session(&state, &id)?;
        let m = SessionManifest::load(&layout)?;
        let entry = m
            .images
            .iter()
            .find(|i| i.image_id == image_id)
            .ok_or_else(|| ServiceError::NotFound(format!("image `{image_id}`")))?;
        let bytes = read_file(&layout.root.join(&entry.path), &format!("image file for `{image_id}`"))?;
        Ok(bytes_response(bytes, "image/png"))
    })
    .await
}

async fn get_mesh(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    blocking(move || {
        let layout = session(&state, &id)?;
        let m = SessionManifest::load(&layout)?;
        let bytes = read_file(&layout.root.join(&m.mesh), "mesh")?;
        Ok(bytes_response(bytes, "model/obj"))
    })
    .await
}

async fn get_texture(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    blocking(move || {
        let layout = session(&state, &id)?;
        let m = SessionManifest::load(&layout)?;
        let rel = m.texture.ok_or_else(|| ServiceError::NotFound("texture".into()))?;
        Ok(bytes_response(read_file(&layout.root.join(rel), "texture")?, "image/png"))
    })
    .await
}

fn load_image_detections(layout: &SessionLayout, image_id: &str) -> Result<Vec<Detection2D>, ServiceError> {
    let bytes = read_file(&layout.detections(), "detections")?;
    let text = String::from_utf8_lossy(&bytes);
    let mut set = detections_from_json(&text).map_err(|e| ServiceError::MalformedSession {
        path: layout.detections(),
        msg: e.to_string(),
    })?;
    set.remove(image_id)
        .ok_or_else(|| ServiceError::NotFound(format!("detections for image `{image_id}`")))
}

async fn get_image_detections(
    State(state): State<Arc<AppState>>,
    UrlPath((id, image_id)): UrlPath<(String, String)>,
) -> ApiResult<Json<Vec<Detection2D>>> {
    blocking(move || load_image_detections(&session(&state, &id)?, &image_id))
        .await
        .map(Json)
}

async fn get_detection(
    State(state): State<Arc<AppState>>,
    UrlPath((id, image_id, det_id)): UrlPath<(String, String, u32)>,
) -> ApiResult<Json<Detection2D>> {
    blocking(move || {
        load_image_detections(&session(&state, &id)?, &image_id)?
            .into_iter()
            .find(|d| d.det_id == det_id)
            .ok_or_else(|| ServiceError::NotFound(format!("detection {image_id}/{det_id}")))
    })
    .await
    .map(Json)
}

async fn edit(state: Arc<AppState>, id: String, image_id: String, det_id: u32, body: PatchBody) -> ApiResult<Response> {
    blocking(move || {
        let layout = session(&state, &id)?;
        let edit = CurationEdit {
            image_id,
            det_id,
            action: body.action,
            notes: body.notes,
            edited_at: None,
        };
        let ack = apply_edit(&layout.root, &edit)?;
        Ok(Json(ack).into_response())
    })
    .await
}

async fn patch_image_detection(
    State(state): State<Arc<AppState>>,
    UrlPath((id, image_id)): UrlPath<(String, String)>,
    Json(body): Json<PatchBody>,
) -> ApiResult<Response> {
    let det_id = body
        .det_id
        .ok_or_else(|| ApiError(ServiceError::BadRequest("det_id is required".into())))?;
    edit(state, id, image_id, det_id, body).await
}

async fn patch_detection(
    State(state): State<Arc<AppState>>,
    UrlPath((id, image_id, det_id)): UrlPath<(String, String, u32)>,
    Json(body): Json<PatchBody>,
) -> ApiResult<Response> {
    if body.det_id.is_some_and(|d| d != det_id) {
        return Err(ApiError(ServiceError::BadRequest("det_id in body differs from the URL".into())));
    }
    edit(state, id, image_id, det_id, body).await
}

async fn get_lesions(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    blocking(move || {
        let layout = session(&state, &id)?;
        Ok(bytes_response(read_file(&layout.lesions(), "lesions")?, "application/json"))
    })
    .await
}

async fn get_tracks(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    blocking(move || {
        let layout = session(&state, &id)?;
        Ok(bytes_response(read_file(&layout.tracks(), "tracks")?, "application/json"))
    })
    .await
}
