//! HTTP front end for a packed NFPS stream.
//!
//! One session per server: clients pull chunks with `GET /chunk/{i}`, and
//! each fetched chunk is applied to the server's model in frame order. A
//! render is only allowed for times the loaded chunks cover.

use std::collections::HashMap;
use std::future::Future;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chanstream::fields::SceneModel;
use chanstream::image::ImageError;
use chanstream::render::{blend, decomposition_colors, render_image, Camera, RenderConfig, RenderError};
use chanstream::stream_io::{chunk_range, mean_bitrate, StreamError, StreamManifest, StreamReader};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Focal length in pixels per pixel of image width.
pub const FOCAL_PER_WIDTH: f64 = 62.0 / 64.0;
/// Largest accepted render width or height.
pub const MAX_RENDER_SIDE: usize = 1024;
/// Grid used to quantize render queries, both for caching and rendering.
pub const QUANTUM: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("frame {t} needs chunk {required_chunk}; chunks are loaded through {loaded}")]
    NotLoaded { t: f64, required_chunk: usize, loaded: usize },
    #[error("no chunk {0}")]
    NoChunk(usize),
    #[error("render task failed: {0}")]
    Task(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    required_chunk: Option<usize>,
}

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        let (status, required_chunk) = match &self {
            ServerError::BadRequest(_) => (StatusCode::BAD_REQUEST, None),
            ServerError::Render(RenderError::Camera(_)) => (StatusCode::BAD_REQUEST, None),
            ServerError::NotLoaded { required_chunk, .. } => (StatusCode::CONFLICT, Some(*required_chunk)),
            ServerError::NoChunk(_) => (StatusCode::NOT_FOUND, None),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        let mut resp = (status, Json(ErrorBody { error: self.to_string(), required_chunk })).into_response();
        if let Some(c) = required_chunk {
            resp.headers_mut().insert("x-required-chunk", HeaderValue::from(c));
        }
        resp
    }
}

/// A validated `/render` request, already snapped to the [`QUANTUM`] grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderQuery {
    pub t: f64,
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub overlay: bool,
}

type CacheKey = (i64, [i64; 9], usize, usize, bool);

fn quantize(v: f64) -> i64 {
    (v / QUANTUM).round() as i64
}

impl RenderQuery {
    /// Parses `t, px, py, pz, lx, ly, lz, ux, uy, uz, w, h, overlay`.
    pub fn parse(params: &HashMap<String, String>) -> Result<Self, ServerError> {
        let num = |key: &str| -> Result<f64, ServerError> {
            let raw = params.get(key).ok_or_else(|| ServerError::BadRequest(format!("missing parameter {key}")))?;
            let v: f64 = raw.parse().map_err(|_| ServerError::BadRequest(format!("{key}={raw:?} is not a number")))?;
            if !v.is_finite() || v.abs() > 1e6 {
                return Err(ServerError::BadRequest(format!("{key}={raw} is out of range")));
            }
            Ok(quantize(v) as f64 * QUANTUM)
        };
        let side = |key: &str| -> Result<usize, ServerError> {
            let raw = params.get(key).ok_or_else(|| ServerError::BadRequest(format!("missing parameter {key}")))?;
            match raw.parse::<usize>() {
                Ok(v) if (1..=MAX_RENDER_SIDE).contains(&v) => Ok(v),
                _ => Err(ServerError::BadRequest(format!("{key} must be an integer in 1..={MAX_RENDER_SIDE}"))),
            }
        };
        let overlay = match params.get("overlay").map(String::as_str) {
            None | Some("none") => false,
            Some("decomposition") => true,
            Some(o) => return Err(ServerError::BadRequest(format!("unknown overlay {o:?}"))),
        };
        let q = Self {
            t: num("t")?,
            eye: [num("px")?, num("py")?, num("pz")?],
            look_at: [num("lx")?, num("ly")?, num("lz")?],
            up: [num("ux")?, num("uy")?, num("uz")?],
            width: side("w")?,
            height: side("h")?,
            overlay,
        };
        q.camera().map_err(|e| ServerError::BadRequest(format!("invalid pose: {e}")))?;
        Ok(q)
    }

    pub fn camera(&self) -> Result<Camera, RenderError> {
        Camera::look_at(self.eye, self.look_at, self.up, self.width, self.height, FOCAL_PER_WIDTH * self.width as f64)
    }

    fn key(&self) -> CacheKey {
        let mut pose = [0; 9];
        for (o, v) in pose.iter_mut().zip(self.eye.iter().chain(&self.look_at).chain(&self.up)) {
            *o = quantize(*v);
        }
        (quantize(self.t), pose, self.width, self.height, self.overlay)
    }
}

/// Render settings shared by the server and offline comparisons.
pub fn render_config() -> RenderConfig {
    RenderConfig::default()
}

/// Renders `query` to PNG bytes.
pub fn render_png(model: &SceneModel, query: &RenderQuery) -> Result<Vec<u8>, ServerError> {
    let camera = query.camera()?;
    let r = render_image(model, &camera, query.t, &render_config())?;
    let image = if query.overlay {
        let map = decomposition_colors(camera.width, camera.height, &r.decomposition);
        blend(&r.image, &map, 0.5)?
    } else {
        r.image
    };
    Ok(image.png_bytes()?)
}

struct Session {
    reader: StreamReader,
    snapshot: Arc<SceneModel>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub frames: usize,
    pub bytes_served: u64,
    pub bytes_served_per_chunk: Vec<u64>,
    /// Stream size over frame count, from the manifest.
    pub mean_bitrate: f64,
    pub renders_served: u64,
    pub cache_hits: u64,
    pub loaded_frames: usize,
}

pub struct AppState {
    bytes: Bytes,
    manifest: StreamManifest,
    session: RwLock<Session>,
    cache: Mutex<Option<LruCache<CacheKey, Bytes>>>,
    served: Vec<AtomicU64>,
    renders: AtomicU64,
    hits: AtomicU64,
}

impl AppState {
    pub fn open(path: &Path, cache_size: usize) -> Result<Self, ServerError> {
        Self::from_bytes(std::fs::read(path)?, cache_size)
    }

    /// Validates the whole stream and starts a session with only the base
    /// payload applied. A cache size of 0 disables caching.
    pub fn from_bytes(bytes: Vec<u8>, cache_size: usize) -> Result<Self, ServerError> {
        let reader = StreamReader::from_base(&bytes)?;
        let manifest = reader.manifest().clone();
        if manifest.total_bytes != bytes.len() as u64 {
            return Err(StreamError::Truncated(format!("expected {} bytes, found {}", manifest.total_bytes, bytes.len())).into());
        }
        // Every chunk is checked up front so a corrupt stream fails at startup.
        let mut probe = reader.clone();
        probe.load_through(&bytes, manifest.frames() - 1)?;
        drop(probe);
        let snapshot = Arc::new(reader.model().clone());
        Ok(Self {
            served: (0..manifest.frames()).map(|_| AtomicU64::new(0)).collect(),
            bytes: Bytes::from(bytes),
            manifest,
            session: RwLock::new(Session { reader, snapshot }),
            cache: Mutex::new(NonZeroUsize::new(cache_size).map(LruCache::new)),
            renders: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        })
    }

    pub fn manifest(&self) -> &StreamManifest {
        &self.manifest
    }

    pub fn loaded_frames(&self) -> usize {
        self.session.read().expect("session lock").reader.loaded_frames()
    }

    /// Returns chunk `i` and applies it to the session model.
    pub fn fetch_chunk(&self, i: usize) -> Result<Bytes, ServerError> {
        let range = chunk_range(&self.manifest, i).map_err(|_| ServerError::NoChunk(i))?;
        let body = self.bytes.slice(range);
        if i > 0 {
            let mut s = self.session.write().expect("session lock");
            let before = s.reader.loaded_frames();
            let after = s.reader.add_chunk(i, &body)?;
            if after != before {
                s.snapshot = Arc::new(s.reader.model().clone());
            }
        }
        self.served[i].fetch_add(body.len() as u64, Ordering::Relaxed);
        Ok(body)
    }

    fn model_for(&self, t: f64) -> Result<Arc<SceneModel>, ServerError> {
        let last = (self.manifest.frames() - 1) as f64;
        if !(0.0..=last).contains(&t) {
            return Err(ServerError::BadRequest(format!("t={t} is outside [0, {last}]")));
        }
        let s = self.session.read().expect("session lock");
        let loaded = s.reader.loaded_frames();
        if t > loaded as f64 {
            return Err(ServerError::NotLoaded { t, required_chunk: loaded + 1, loaded });
        }
        Ok(Arc::clone(&s.snapshot))
    }

    pub async fn render(self: &Arc<Self>, query: RenderQuery) -> Result<Bytes, ServerError> {
        let model = self.model_for(query.t)?;
        let key = query.key();
        let cached = self.cache.lock().expect("cache lock").as_mut().and_then(|c| c.get(&key).cloned());
        let png = match cached {
            Some(png) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                png
            }
            None => {
                let png = tokio::task::spawn_blocking(move || render_png(&model, &query))
                    .await
                    .map_err(|e| ServerError::Task(e.to_string()))??;
                let png = Bytes::from(png);
                if let Some(c) = self.cache.lock().expect("cache lock").as_mut() {
                    c.put(key, png.clone());
                }
                png
            }
        };
        self.renders.fetch_add(1, Ordering::Relaxed);
        Ok(png)
    }

    pub fn metrics(&self) -> Metrics {
        let per: Vec<u64> = self.served.iter().map(|a| a.load(Ordering::Relaxed)).collect();
        Metrics {
            frames: self.manifest.frames(),
            bytes_served: per.iter().sum(),
            bytes_served_per_chunk: per,
            mean_bitrate: mean_bitrate(&self.manifest),
            renders_served: self.renders.load(Ordering::Relaxed),
            cache_hits: self.hits.load(Ordering::Relaxed),
            loaded_frames: self.loaded_frames(),
        }
    }
}

async fn manifest_handler(State(state): State<Arc<AppState>>) -> Json<StreamManifest> {
    Json(state.manifest.clone())
}

async fn chunk_handler(State(state): State<Arc<AppState>>, UrlPath(i): UrlPath<String>) -> Result<Response, ServerError> {
    let i: usize = i.parse().map_err(|_| ServerError::NoChunk(usize::MAX))?;
    let body = state.fetch_chunk(i)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], body).into_response())
}

async fn render_handler(State(state): State<Arc<AppState>>, Query(params): Query<HashMap<String, String>>) -> Result<Response, ServerError> {
    let query = RenderQuery::parse(&params)?;
    let png = state.render(query).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn metrics_handler(State(state): State<Arc<AppState>>) -> Json<Metrics> {
    Json(state.metrics())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/manifest", get(manifest_handler))
        .route("/chunk/{i}", get(chunk_handler))
        .route("/render", get(render_handler))
        .route("/metrics", get(metrics_handler))
        .layer(axum::middleware::map_response(|mut r: Response| async move {
            r.headers_mut().insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
            r
        }))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

/// Opens the stream, binds and serves until a shutdown signal.
pub fn run(stream: &Path, bind: &str, cache_size: usize) -> Result<(), ServerError> {
    let state = Arc::new(AppState::open(stream, cache_size)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        eprintln!("serving {} on http://{}", stream.display(), listener.local_addr()?);
        serve(listener, state, shutdown_signal()).await
    })?;
    Ok(())
}
