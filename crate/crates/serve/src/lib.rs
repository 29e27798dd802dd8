//! HTTP service for interactive restoration.
//!
//! * `POST /images` takes PNG bytes, stores a session keyed by the SHA-256 of
//!   the bytes and eagerly computes both noise predictions.
//! * `POST /restore` takes `{image_id, lambda_pix, lambda_sem}` and returns
//!   the blended restoration as PNG. It never evaluates the denoiser.
//! * `GET /models` returns static model metadata once the bundle is loaded.

use std::io::Cursor;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, OnceLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::ImageDecoder;
use lru::LruCache;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::OnceCell;
use tower_http::cors::{AllowOrigin, CorsLayer};

use dualsr_core::codec::DOWNSCALE;
use dualsr_core::infer::{Bundle, EpsCache, GuidanceScales, UI_SCALE_RANGE};
use dualsr_core::tensor::ImageTensor;

pub const HEADER_LAMBDA_PIX: &str = "x-lambda-pix";
pub const HEADER_LAMBDA_SEM: &str = "x-lambda-sem";
pub const HEADER_DENOISER_EVALS: &str = "x-denoiser-evals";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Largest accepted width or height in pixels.
    pub max_dim: usize,
    /// Sessions kept before least-recently-used eviction.
    pub capacity: usize,
    pub max_upload_bytes: usize,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_dim: 512,
            capacity: 64,
            max_upload_bytes: 8 << 20,
            cors_origin: None,
        }
    }
}

/// One uploaded image with its cached predictions.
pub struct Session {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub cache: EpsCache,
}

struct Loaded {
    bundle: Arc<Bundle>,
    models: Value,
}

type SessionCell = Arc<OnceCell<Arc<Session>>>;

pub struct AppState {
    cfg: ServiceConfig,
    loaded: OnceLock<Loaded>,
    sessions: Mutex<LruCache<String, SessionCell>>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        let cap = NonZeroUsize::new(cfg.capacity.max(1)).unwrap();
        Arc::new(Self {
            cfg,
            loaded: OnceLock::new(),
            sessions: Mutex::new(LruCache::new(cap)),
        })
    }

    /// Installs the model. Until this is called every endpoint answers 503.
    /// Later calls are ignored.
    pub fn warm(&self, bundle: Bundle, checkpoint_tag: &str) {
        let models = models_json(&bundle, checkpoint_tag);
        let _ = self.loaded.set(Loaded {
            bundle: Arc::new(bundle),
            models,
        });
    }

    pub fn is_ready(&self) -> bool {
        self.loaded.get().is_some()
    }

    pub fn bundle(&self) -> Option<Arc<Bundle>> {
        self.loaded.get().map(|l| l.bundle.clone())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.lock().unwrap().get(id).and_then(|c| c.get().cloned())
    }
}

fn models_json(bundle: &Bundle, tag: &str) -> Value {
    let p = bundle.schedule().params();
    let (lo, hi) = UI_SCALE_RANGE;
    json!({
        "checkpoint_tag": tag,
        "schedule": {"steps": p.steps, "beta_start": p.beta_start, "beta_end": p.beta_end},
        "student_timestep": bundle.student_timestep(),
        "lora_ranks": {"pixel": bundle.pixel().rank, "semantic": bundle.semantic().rank},
        "ui_scale_ranges": {"lambda_pix": [lo, hi], "lambda_sem": [lo, hi]},
    })
}

/// Encodes the blended restoration for `scales`. Shared with the CLI so
/// both paths produce identical bytes.
pub fn render_png(bundle: &Bundle, cache: &EpsCache, scales: GuidanceScales) -> dualsr_core::Result<Vec<u8>> {
    bundle.blend_from_cache(cache, scales)?.encode_png()
}

pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model is still loading")
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

#[derive(Serialize)]
struct UploadResponse {
    image_id: String,
    width: usize,
    height: usize,
}

fn png_dimensions(bytes: &[u8]) -> Result<(usize, usize), ApiError> {
    let dec = image::codecs::png::PngDecoder::new(Cursor::new(bytes))
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed PNG: {e}")))?;
    let (w, h) = dec.dimensions();
    Ok((w as usize, h as usize))
}

async fn upload(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<UploadResponse>, ApiError> {
    let bundle = state.bundle().ok_or_else(ApiError::unavailable)?;
    let (width, height) = png_dimensions(&body)?;
    if width > state.cfg.max_dim || height > state.cfg.max_dim {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("{width}x{height} exceeds the {0}x{0} limit", state.cfg.max_dim),
        ));
    }
    let multiple = DOWNSCALE * bundle.student_base().config().spatial_multiple();
    if width == 0 || height == 0 || width % multiple != 0 || height % multiple != 0 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("{width}x{height} is not divisible by {multiple}"),
        ));
    }
    let id = content_id(&body);
    let cell = {
        let mut sessions = state.sessions.lock().unwrap();
        match sessions.get(&id) {
            Some(c) => c.clone(),
            None => {
                let c: SessionCell = Arc::new(OnceCell::new());
                sessions.put(id.clone(), c.clone());
                c
            }
        }
    };
    // Duplicate uploads wait on the same build.
    let session = cell
        .get_or_try_init(|| {
            let (bundle, id, body) = (bundle.clone(), id.clone(), body.clone());
            async move {
                tokio::task::spawn_blocking(move || -> Result<Arc<Session>, ApiError> {
                    let lq = ImageTensor::decode_png(&body)
                        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed PNG: {e}")))?;
                    let cache = bundle.build_cache(&id, &lq).map_err(ApiError::internal)?;
                    Ok(Arc::new(Session {
                        id,
                        width,
                        height,
                        cache,
                    }))
                })
                .await
                .map_err(ApiError::internal)?
            }
        })
        .await;
    match session {
        Ok(s) => Ok(Json(UploadResponse {
            image_id: s.id.clone(),
            width: s.width,
            height: s.height,
        })),
        Err(e) => {
            let mut sessions = state.sessions.lock().unwrap();
            if sessions.peek(&id).is_some_and(|c| Arc::ptr_eq(c, &cell)) {
                sessions.pop(&id);
            }
            Err(e)
        }
    }
}

fn scale_field(v: &Value, name: &str) -> Result<f64, ApiError> {
    let x = v
        .get(name)
        .and_then(Value::as_f64)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("`{name}` must be a number")))?;
    if !x.is_finite() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("`{name}` must be finite")));
    }
    Ok(x)
}

fn header_f64(v: f64) -> HeaderValue {
    HeaderValue::from_str(&v.to_string()).unwrap()
}

async fn restore(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let bundle = state.bundle().ok_or_else(ApiError::unavailable)?;
    let req: Value = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid JSON body: {e}")))?;
    let id = req
        .get("image_id")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "`image_id` must be a string"))?
        .to_string();
    let scales = GuidanceScales::new(scale_field(&req, "lambda_pix")?, scale_field(&req, "lambda_sem")?);
    let session = state
        .session(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image id {id}")))?;
    let b = bundle.clone();
    let png = tokio::task::spawn_blocking(move || render_png(&b, &session.cache, scales))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let evals = bundle.denoiser_evaluations();
    let mut resp = (StatusCode::OK, png).into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    h.insert(HeaderName::from_static(HEADER_LAMBDA_PIX), header_f64(scales.lambda_pix));
    h.insert(HeaderName::from_static(HEADER_LAMBDA_SEM), header_f64(scales.lambda_sem));
    h.insert(HeaderName::from_static(HEADER_DENOISER_EVALS), HeaderValue::from(evals));
    Ok(resp)
}

async fn models(State(state): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    state
        .loaded
        .get()
        .map(|l| Json(l.models.clone()))
        .ok_or_else(ApiError::unavailable)
}

pub fn router(state: Arc<AppState>) -> Router {
    let origin = match &state.cfg.cors_origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).unwrap_or(HeaderValue::from_static("null"))),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([header::CONTENT_TYPE])
        .expose_headers([
            HeaderName::from_static(HEADER_LAMBDA_PIX),
            HeaderName::from_static(HEADER_LAMBDA_SEM),
            HeaderName::from_static(HEADER_DENOISER_EVALS),
        ]);
    let limit = state.cfg.max_upload_bytes;
    Router::new()
        .route("/images", post(upload))
        .route("/restore", post(restore))
        .route("/models", get(models))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(addr: std::net::SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
