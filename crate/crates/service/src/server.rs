//! HTTP session service.
//!
//! Each session lives behind its own lock. Mutating endpoints take it with
//! `try_write` and answer 409 when another mutation holds it; reads wait.

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tokio::sync::{OwnedRwLockWriteGuard, RwLock as AsyncRwLock};
use tower_http::services::ServeDir;

use segsteer_core::adapt::{AdaptConfig, LossBreakdown, SessionOptions};
use segsteer_core::annotation::Click;
use segsteer_core::metrics::IouCurve;
use segsteer_core::raster::{decode_pgm, decode_ppm, encode_pgm, encode_prob, TileSpec};
use segsteer_core::Error as CoreError;

use crate::registry::{ModelInfo, Registry};
use crate::store::SessionRecord;

const MAX_BODY: usize = 64 << 20;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match e {
            CoreError::Invalid(_)
            | CoreError::OutOfBounds { .. }
            | CoreError::ClassRange { .. }
            | CoreError::Shape { .. }
            | CoreError::Parse { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AsyncRwLock<SessionRecord>>;

pub struct AppState {
    pub registry: Registry,
    sessions: RwLock<HashMap<String, Shared>>,
    session_root: Option<PathBuf>,
    pub adapt: AdaptConfig,
    pub tiling: Option<TileSpec>,
}

impl AppState {
    pub fn new(registry: Registry, session_root: Option<PathBuf>, adapt: AdaptConfig, tiling: Option<TileSpec>) -> Self {
        Self {
            registry,
            sessions: RwLock::new(HashMap::new()),
            session_root,
            adapt,
            tiling,
        }
    }

    /// Loads every persisted session; returns how many were recovered.
    /// Unreadable session directories are reported and skipped.
    pub fn recover(&self) -> std::io::Result<usize> {
        let Some(root) = &self.session_root else {
            return Ok(0);
        };
        fs::create_dir_all(root)?;
        let mut n = 0;
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("meta.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            match SessionRecord::load(&dir, &self.registry) {
                Ok(rec) => {
                    let id = rec.id.clone();
                    self.sessions.write().unwrap().insert(id, Arc::new(AsyncRwLock::new(rec)));
                    n += 1;
                }
                Err(e) => eprintln!("skipping session {}: {e}", dir.display()),
            }
        }
        Ok(n)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    pub fn session(&self, id: &str) -> Option<Arc<AsyncRwLock<SessionRecord>>> {
        self.sessions.read().unwrap().get(id).cloned()
    }

    fn lookup(&self, id: &str) -> ApiResult<Shared> {
        self.session(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id:?}")))
    }

    fn persist(&self, rec: &SessionRecord) -> ApiResult<()> {
        if let Some(root) = &self.session_root {
            rec.save(&root.join(&rec.id))?;
        }
        Ok(())
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/models", get(models))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/prediction", get(prediction))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/adapt", post(adapt))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/metrics", get(metrics))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(state: Arc<AppState>, static_dir: Option<PathBuf>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    let app = router(state, static_dir.as_deref());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn lock_for_mutation(rec: Shared) -> ApiResult<OwnedRwLockWriteGuard<SessionRecord>> {
    rec.try_write_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "another change to this session is in progress"))
}

fn decode_b64(field: &str, text: &str) -> ApiResult<Vec<u8>> {
    B64.decode(text.trim())
        .map_err(|e| ApiError::unprocessable(format!("{field}: invalid base64: {e}")))
}

#[derive(Serialize)]
struct ModelsResponse {
    default_model: Option<String>,
    models: Vec<ModelInfo>,
}

async fn models(State(state): State<Arc<AppState>>) -> Json<ModelsResponse> {
    Json(ModelsResponse {
        default_model: state.registry.default_id().map(str::to_owned),
        models: state.registry.listing(),
    })
}

#[derive(Deserialize)]
pub struct CreateSession {
    pub image: String,
    #[serde(default)]
    pub gt: Option<String>,
    #[serde(default)]
    pub model_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub initial_miou: Option<f64>,
}

async fn create_session(State(state): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<Created>)> {
    let image = decode_ppm(&decode_b64("image", &req.image)?, Path::new("image"))?;
    let entry = state
        .registry
        .get(req.model_id.as_deref())
        .ok_or_else(|| ApiError::unprocessable(format!("unknown model {:?}", req.model_id)))?
        .clone();
    let gt = match &req.gt {
        Some(g) => Some(decode_pgm(&decode_b64("gt", g)?, Path::new("gt"), Some(entry.model.num_classes()))?),
        None => None,
    };
    let options = SessionOptions {
        radius: entry.radius(),
        tiling: state.tiling,
    };
    let st = state.clone();
    let rec = blocking(move || {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let rec = SessionRecord::new(id, &entry, image, gt, options)?;
        st.persist(&rec)?;
        Ok(rec)
    })
    .await?;
    let out = Created {
        session_id: rec.id.clone(),
        height: rec.session.image().height(),
        width: rec.session.image().width(),
        num_classes: rec.num_classes(),
        initial_miou: rec.initial_miou(),
    };
    state
        .sessions
        .write()
        .unwrap()
        .insert(rec.id.clone(), Arc::new(AsyncRwLock::new(rec)));
    Ok((StatusCode::CREATED, Json(out)))
}

#[derive(Deserialize)]
pub struct PredictionQuery {
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub probs: bool,
}

#[derive(Serialize, Deserialize)]
pub struct Prediction {
    /// Base64 PGM of the argmax map.
    pub labels: String,
    pub probs_available: bool,
    /// Base64 probability file, when requested with `probs=true`.
    pub probs: Option<String>,
    pub miou: Option<f64>,
}

async fn prediction(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<PredictionQuery>) -> ApiResult<Json<Prediction>> {
    let initial = match q.mode.as_deref() {
        None | Some("disir") => false,
        Some("initial") => true,
        Some(other) => return Err(ApiError::unprocessable(format!("unknown mode {other:?}; use disir or initial"))),
    };
    let rec = state.lookup(&id)?.read_owned().await;
    blocking(move || {
        let probs = if initial { rec.session.p0().clone() } else { rec.prediction()? };
        let labels = probs.argmax();
        Ok(Json(Prediction {
            labels: B64.encode(encode_pgm(&labels)),
            probs_available: true,
            probs: q.probs.then(|| B64.encode(encode_prob(&probs))),
            miou: rec.score(&labels)?.map(|r| r.mean),
        }))
    })
    .await
}

#[derive(Deserialize)]
pub struct ClickRequest {
    pub row: i64,
    pub col: i64,
    pub class_id: i64,
}

#[derive(Serialize, Deserialize)]
pub struct ClickAccepted {
    pub accepted: bool,
    pub click_count: usize,
    pub miou: Option<f64>,
}

async fn add_click(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Json(req): Json<ClickRequest>) -> ApiResult<Json<ClickAccepted>> {
    let mut rec = lock_for_mutation(state.lookup(&id)?)?;
    let (h, w) = (rec.session.image().height(), rec.session.image().width());
    if req.row < 0 || req.col < 0 || req.row >= h as i64 || req.col >= w as i64 {
        return Err(CoreError::OutOfBounds {
            row: req.row,
            col: req.col,
            height: h,
            width: w,
        }
        .into());
    }
    if req.class_id < 0 {
        return Err(ApiError::unprocessable("class_id must be non-negative"));
    }
    blocking(move || {
        rec.add_click(req.row as usize, req.col as usize, req.class_id as usize)?;
        state.persist(&rec)?;
        Ok(Json(ClickAccepted {
            accepted: true,
            click_count: rec.session.clicks().len(),
            miou: rec.curve.records.last().filter(|p| p.click_count == rec.session.clicks().len()).map(|p| p.miou),
        }))
    })
    .await
}

#[derive(Default, Deserialize)]
pub struct AdaptRequest {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Adapted {
    pub loss_trace: Vec<LossBreakdown>,
    pub miou_after: Option<f64>,
}

async fn adapt(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Option<Json<AdaptRequest>>) -> ApiResult<Json<Adapted>> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let mut rec = lock_for_mutation(state.lookup(&id)?)?;
    let mut cfg = state.adapt;
    cfg.steps = req.steps.unwrap_or(cfg.steps);
    cfg.lr = req.lr.unwrap_or(cfg.lr);
    cfg.lambda = req.lambda.unwrap_or(cfg.lambda);
    cfg.validate()?;
    blocking(move || {
        let (loss_trace, miou_after) = rec.adapt(&cfg)?;
        state.persist(&rec)?;
        Ok(Json(Adapted { loss_trace, miou_after }))
    })
    .await
}

#[derive(Serialize, Deserialize)]
pub struct UndoResponse {
    pub removed: Click,
    pub click_count: usize,
    pub theta_restored: bool,
}

async fn undo(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<UndoResponse>> {
    let mut rec = lock_for_mutation(state.lookup(&id)?)?;
    blocking(move || {
        let undone = rec.undo()?.ok_or_else(|| ApiError::unprocessable("no click to undo"))?;
        state.persist(&rec)?;
        Ok(Json(UndoResponse {
            removed: undone.click,
            click_count: rec.session.clicks().len(),
            theta_restored: undone.theta_restored,
        }))
    })
    .await
}

async fn metrics(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<IouCurve>> {
    let rec = state.lookup(&id)?;
    let rec = rec.read().await;
    Ok(Json(rec.curve.clone()))
}
