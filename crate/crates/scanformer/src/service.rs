//! HTTP/JSON scanning service.
//!
//! `POST /sessions` runs the source-only pass once and keeps the sealed scene
//! cache; every later render or accumulate is a cached target query. Poses on
//! the wire are camera-to-world: `{"rotation": [9 row-major], "center": [3]}`.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | GET | `/health` | | model config |
//! | POST | `/sessions` | `{"images": [base64 PNG; N], "fov_deg"?}` | 201 session |
//! | GET | `/sessions/{id}` | | session summary |
//! | GET | `/sessions/{id}/sources.rngt` | | source point maps (RNGT) |
//! | POST | `/sessions/{id}/render` | `{"pose"}` | PNG + RNGT maps, base64 |
//! | POST | `/sessions/{id}/accumulate` | `{"pose", "conf_quantile"}` | point counts |
//! | GET | `/sessions/{id}/pointcloud` | | binary PLY |
//! | DELETE | `/sessions/{id}` | | 204 |
//!
//! Errors carry `{"error": kind, "message": text}` with status 400 (bad
//! request), 404 (unknown session), 413 (body too large) or 422 (invalid
//! pose, empty accumulation).

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use scanformer_core::attention::SceneCache;
use scanformer_core::geometry::{CameraPose, Intrinsics, PointCloud};
use scanformer_core::metrics::{depth_from_pointmap, scan_points};
use scanformer_core::model::{Model, TargetMaps};

use crate::dataset::PoseJson;
use crate::error::IoError;
use crate::evaluation::{model_intrinsics, source_images};
use crate::image_io::{decode_png, encode_png};
use crate::rngt::{Container, Tensor};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_sessions: usize,
    pub default_fov_deg: f64,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { max_sessions: 16, default_fov_deg: 60.0, max_body_bytes: 8 << 20 }
    }
}

pub struct Session {
    pub id: String,
    pub cache: SceneCache<f32>,
    pub poses: Vec<CameraPose>,
    pub intrinsics: Intrinsics,
    pub created_at: u64,
    pub sources_rngt: Vec<u8>,
    /// Also serialises accumulate requests on this session.
    pub cloud: Mutex<PointCloud>,
}

struct Entry {
    session: Arc<Session>,
    last_used: u64,
}

#[derive(Default)]
struct Sessions {
    map: HashMap<String, Entry>,
    clock: u64,
}

pub struct AppState {
    pub model: Arc<Model<f32>>,
    pub config: ServiceConfig,
    sessions: Mutex<Sessions>,
}

impl AppState {
    pub fn new(model: Model<f32>, config: ServiceConfig) -> Arc<Self> {
        Arc::new(AppState { model: Arc::new(model), config, sessions: Mutex::new(Sessions::default()) })
    }

    fn lookup(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        let mut s = self.sessions.lock().expect("session table poisoned");
        s.clock += 1;
        let now = s.clock;
        let e = s.map.get_mut(id).ok_or_else(|| ApiError::not_found(id))?;
        e.last_used = now;
        Ok(e.session.clone())
    }

    fn insert(&self, session: Arc<Session>) {
        let mut s = self.sessions.lock().expect("session table poisoned");
        s.clock += 1;
        let now = s.clock;
        while s.map.len() >= self.config.max_sessions.max(1) {
            let oldest = s.map.iter().min_by_key(|(_, e)| e.last_used).map(|(k, _)| k.clone());
            match oldest {
                Some(k) => s.map.remove(&k),
                None => break,
            };
        }
        s.map.insert(session.id.clone(), Entry { session, last_used: now });
    }

    fn remove(&self, id: &str) -> bool {
        self.sessions.lock().expect("session table poisoned").map.remove(id).is_some()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").map.len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}"))
    }

    fn unprocessable(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, kind, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl From<IoError> for ApiError {
    fn from(e: IoError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.kind, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

async fn blocking<R: Send + 'static>(f: impl FnOnce() -> ApiResult<R> + Send + 'static) -> ApiResult<R> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub images: Vec<String>,
    pub fov_deg: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionInfo {
    pub id: String,
    pub poses: Vec<PoseJson>,
    /// Hex digest of the cached keys and values.
    pub cache_hash: String,
    pub total_points: usize,
    pub created_at: u64,
    pub source_pointmaps: String,
}

fn info(s: &Session) -> SessionInfo {
    SessionInfo {
        id: s.id.clone(),
        poses: s.poses.iter().map(PoseJson::from_pose).collect(),
        cache_hash: format!("{:016x}", s.cache.content_hash()),
        total_points: s.cloud.lock().expect("cloud poisoned").len(),
        created_at: s.created_at,
        source_pointmaps: format!("/sessions/{}/sources.rngt", s.id),
    }
}

/// Depth, point map and confidence of one query as an RNGT container.
pub fn maps_container(maps: &TargetMaps<f32>, pose: &CameraPose) -> Result<Container, IoError> {
    let (w, h) = (maps.width, maps.height);
    let depth: Vec<f32> = depth_from_pointmap(&maps.pointmap, pose).into_iter().map(|d| d as f32).collect();
    let tensors = vec![
        Tensor::new("depth", &[h, w], depth)?,
        Tensor::new("pointmap", &[h, w, 3], maps.pointmap.clone())?,
        Tensor::new("confidence", &[h, w], maps.confidence.clone())?,
    ];
    Container::new(tensors, &json!({"pose": PoseJson::from_pose(pose)}))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateRequest = parse(&body)?;
    let cfg = app.model.config().clone();
    let mut images = Vec::with_capacity(req.images.len());
    for (i, b64) in req.images.iter().enumerate() {
        let bytes = B64.decode(b64).map_err(|e| ApiError::bad_request(format!("image {i}: {e}")))?;
        images.push(decode_png(&bytes).map_err(|e| ApiError::bad_request(format!("image {i}: {e}")))?);
    }
    let sources = source_images(&images, &cfg).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let fov = req.fov_deg.unwrap_or(app.config.default_fov_deg);
    if !(fov > 1.0 && fov < 179.0) {
        return Err(ApiError::bad_request(format!("field of view {fov} out of range")));
    }
    let intrinsics = model_intrinsics(&cfg, fov);
    let model = app.model.clone();
    let session = blocking(move || {
        let refs: Vec<&[f32]> = sources.iter().map(Vec::as_slice).collect();
        let stage1 = model.forward_stage1(&refs, &intrinsics).map_err(|e| ApiError::bad_request(e.to_string()))?;
        for p in &stage1.poses {
            if !p.rotation.is_rotation(1e-6) {
                return Err(ApiError::internal("predicted rotation is not orthonormal"));
            }
        }
        let mut tensors = Vec::new();
        for (v, pose) in stage1.poses.iter().enumerate() {
            let (maps, _) = model.forward_stage2(pose, &stage1.cache).map_err(ApiError::internal)?;
            let c = maps_container(&maps, pose)?;
            for t in c.tensors {
                let name = format!("{}[{v}]", t.name);
                tensors.push(Tensor { name, ..t });
            }
        }
        let poses: Vec<PoseJson> = stage1.poses.iter().map(PoseJson::from_pose).collect();
        let sources_rngt = Container::new(tensors, &json!({"poses": poses}))?.to_bytes()?;
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Ok(Session {
            id: uuid::Uuid::new_v4().simple().to_string(),
            cache: stage1.cache,
            poses: stage1.poses,
            intrinsics,
            created_at,
            sources_rngt,
            cloud: Mutex::new(PointCloud { points: Vec::new(), colors: Some(Vec::new()), confidences: Some(Vec::new()) }),
        })
    })
    .await?;
    let session = Arc::new(session);
    let body = info(&session);
    app.insert(session);
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let s = app.lookup(&id)?;
    Ok(Json(info(&s)))
}

async fn get_sources(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = app.lookup(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], s.sources_rngt.clone()).into_response())
}

#[derive(Debug, Deserialize)]
pub struct RenderRequest {
    pub pose: PoseJson,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RenderResponse {
    pub pose: PoseJson,
    pub width: usize,
    pub height: usize,
    /// Base64 PNG.
    pub rgb: String,
    /// Base64 RNGT holding `depth`, `pointmap` and `confidence`.
    pub maps: String,
}

fn checked_pose(p: &PoseJson, intrinsics: Intrinsics) -> ApiResult<CameraPose> {
    p.to_pose(intrinsics).map_err(|e| ApiError::unprocessable("invalid_pose", e.to_string()))
}

async fn render(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<RenderResponse>> {
    let req: RenderRequest = parse(&body)?;
    let s = app.lookup(&id)?;
    let pose = checked_pose(&req.pose, s.intrinsics)?;
    let model = app.model.clone();
    let echo = req.pose;
    blocking(move || {
        let (maps, _) = model.forward_stage2(&pose, &s.cache).map_err(ApiError::internal)?;
        let png = encode_png(maps.width, maps.height, &maps.rgb_unit())?;
        let rngt = maps_container(&maps, &pose)?.to_bytes()?;
        Ok(Json(RenderResponse { pose: echo, width: maps.width, height: maps.height, rgb: B64.encode(png), maps: B64.encode(rngt) }))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct AccumulateRequest {
    pub pose: PoseJson,
    pub conf_quantile: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AccumulateResponse {
    pub points_added: usize,
    pub total_points: usize,
}

async fn accumulate(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<AccumulateResponse>> {
    let req: AccumulateRequest = parse(&body)?;
    let s = app.lookup(&id)?;
    let pose = checked_pose(&req.pose, s.intrinsics)?;
    if !(0.0..=1.0).contains(&req.conf_quantile) {
        return Err(ApiError::unprocessable("invalid_quantile", "conf_quantile must lie in [0, 1]"));
    }
    let model = app.model.clone();
    blocking(move || {
        let mut cloud = s.cloud.lock().map_err(ApiError::internal)?;
        let (maps, _) = model.forward_stage2(&pose, &s.cache).map_err(ApiError::internal)?;
        let added = scan_points(&maps, req.conf_quantile).map_err(ApiError::internal)?;
        if added.is_empty() {
            return Err(ApiError::unprocessable("empty_addition", "no point passed the confidence threshold"));
        }
        cloud.extend(&added);
        Ok(Json(AccumulateResponse { points_added: added.len(), total_points: cloud.len() }))
    })
    .await
}

async fn pointcloud(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = app.lookup(&id)?;
    let bytes = {
        let cloud = s.cloud.lock().map_err(ApiError::internal)?;
        crate::ply::to_bytes(&cloud)?
    };
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    if app.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(&id))
    }
}

async fn health(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "model": app.model.config(), "sessions": app.session_count()}))
}

pub fn router(app: Arc<AppState>) -> Router {
    let limit = app.config.max_body_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/sources.rngt", get(get_sources))
        .route("/sessions/{id}/render", post(render))
        .route("/sessions/{id}/accumulate", post(accumulate))
        .route("/sessions/{id}/pointcloud", get(pointcloud))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(app)
}

pub async fn serve(app: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(app)).await
}
