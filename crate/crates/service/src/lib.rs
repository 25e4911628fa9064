//! Local render service: scene and material inspection over HTTP, live
//! material patches and a progressive preview stream over WebSocket.
//!
//! | route | |
//! |---|---|
//! | `GET /health` | `{"status":"ok"}` |
//! | `GET /scene` | native scene JSON |
//! | `GET /materials[?raw=true]` | resolved map, or raw documents |
//! | `PATCH /materials/{name}` | sparse properties, returns the resolved material |
//! | `POST /materials/save` | `{"path": ...}` |
//! | `POST /render` | sparse [`RenderParams`] |
//! | `GET /profile` | profiler records |
//! | `WS /preview` | `frame` and `reset` events |

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{close_code, CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::broadcast::error::RecvError;
use tokio::task::JoinHandle;

use tracelet::assets::{material::material_docs_to_json, AssetError, MaterialProps, ResourceManager};
use tracelet::render::{EngineError, World};

mod session;

pub use session::{RenderParams, RenderRequest, ServiceConfig};
use session::Shared;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("failed to load scene: {0}")]
    Scene(#[from] EngineError),
    #[error("failed to bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("server error: {0}")]
    Server(String),
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError { status, code, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": {"code": self.code, "message": self.message}}))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> ApiError {
        let message = e.to_string();
        match e {
            EngineError::UnknownMaterial(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", message),
            EngineError::Asset(AssetError::Range { .. }) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
            }
            EngineError::Asset(AssetError::Constraint { .. } | AssetError::Cycle(_) | AssetError::UnknownParent { .. }) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "constraint", message)
            }
            EngineError::Io { .. } => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", message),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("invalid JSON body: {e}")))?;
    serde_json::from_value(value).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string()))
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn scene(State(s): State<Arc<Shared>>) -> ApiResult {
    let file = s.world().to_scene_file();
    Ok(Json(serde_json::to_value(file).expect("scene serializes")))
}

#[derive(Deserialize)]
struct MaterialsQuery {
    #[serde(default)]
    raw: bool,
}

async fn materials(State(s): State<Arc<Shared>>, Query(q): Query<MaterialsQuery>) -> ApiResult {
    let world = s.world();
    let value = if q.raw {
        serde_json::from_str(&material_docs_to_json(world.material_docs())).expect("documents serialize")
    } else {
        serde_json::to_value(world.materials()).expect("materials serialize")
    };
    Ok(Json(value))
}

async fn patch_material(State(s): State<Arc<Shared>>, UrlPath(name): UrlPath<String>, body: Bytes) -> ApiResult {
    let props: MaterialProps = parse_body(&body)?;
    let resolved = s.world().patch_material(&name, &props)?;
    s.mark_dirty("material_patch");
    Ok(Json(serde_json::to_value(resolved).expect("material serializes")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SaveRequest {
    path: PathBuf,
}

async fn save_materials(State(s): State<Arc<Shared>>, body: Bytes) -> ApiResult {
    let req: SaveRequest = parse_body(&body)?;
    s.world().save_materials(&req.path)?;
    Ok(Json(json!({"saved": true})))
}

async fn render(State(s): State<Arc<Shared>>, body: Bytes) -> ApiResult {
    let req: RenderRequest = if body.iter().all(u8::is_ascii_whitespace) { RenderRequest::default() } else { parse_body(&body)? };
    let params = req.apply(s.params()).map_err(|m| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", m))?;
    s.start_render(params);
    Ok(Json(json!({"started": true})))
}

async fn profile(State(s): State<Arc<Shared>>) -> ApiResult {
    Ok(Json(serde_json::to_value(s.profiler.report()).expect("records serialize")))
}

async fn preview(ws: WebSocketUpgrade, State(s): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| stream_client(socket, s))
}

async fn stream_client(mut socket: WebSocket, shared: Arc<Shared>) {
    let mut events = shared.subscribe();
    let mut shutdown = shared.shutdown.subscribe();
    loop {
        if shared.is_shutting_down() {
            let frame = CloseFrame { code: close_code::AWAY, reason: "shutdown".into() };
            let _ = socket.send(Message::Close(Some(frame))).await;
            break;
        }
        tokio::select! {
            ev = events.recv() => match ev {
                Ok(text) => {
                    if socket.send(Message::Text(text.as_ref().into())).await.is_err() {
                        break;
                    }
                }
                Err(RecvError::Lagged(_)) => {}
                Err(RecvError::Closed) => break,
            },
            msg = socket.recv() => match msg {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                Some(Ok(_)) => {}
            },
            _ = shutdown.changed() => {}
        }
    }
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scene", get(scene))
        .route("/materials", get(materials))
        .route("/materials/save", post(save_materials))
        .route("/materials/{name}", patch(patch_material))
        .route("/render", post(render))
        .route("/profile", get(profile))
        .route("/preview", get(preview))
        .with_state(shared)
}

/// A started service. Dropping it does not stop the server; call
/// [`RunningService::shutdown`].
pub struct RunningService {
    addr: SocketAddr,
    shared: Arc<Shared>,
    server: JoinHandle<std::io::Result<()>>,
    render: JoinHandle<()>,
    reload: Option<JoinHandle<()>>,
}

impl RunningService {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Signals shutdown. Preview clients receive a close frame with reason
    /// `"shutdown"`; an in-flight pass completes first.
    pub fn shutdown(&self) {
        self.shared.shutdown.send_replace(true);
    }

    pub async fn wait(self) -> Result<(), ServiceError> {
        let server = self.server.await;
        let _ = self.render.await;
        if let Some(r) = self.reload {
            let _ = r.await;
        }
        match server {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(ServiceError::Server(e.to_string())),
            Err(e) => Err(ServiceError::Server(e.to_string())),
        }
    }
}

/// Loads `scene_path`, binds `addr` and starts serving in the background.
pub async fn start(addr: &str, scene_path: &Path, config: ServiceConfig) -> Result<RunningService, ServiceError> {
    let mgr = ResourceManager::new();
    let world = World::load(scene_path, &mgr)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::Bind { addr: addr.to_string(), message: e.to_string() })?;
    let local = listener.local_addr().map_err(|e| ServiceError::Bind { addr: addr.to_string(), message: e.to_string() })?;
    let shared = Shared::new(world, mgr, &config);

    let mut stop = shared.shutdown.subscribe();
    let app = router(shared.clone());
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = stop.wait_for(|&s| s).await;
            })
            .await
    });
    let render = tokio::spawn(session::render_loop(shared.clone()));
    let reload = config.reload_interval.map(|i| tokio::spawn(session::reload_loop(shared.clone(), i)));
    Ok(RunningService { addr: local, shared, server, render, reload })
}

/// Runs until Ctrl-C.
pub async fn serve(addr: &str, scene_path: &Path, config: ServiceConfig) -> Result<(), ServiceError> {
    let service = start(addr, scene_path, config).await?;
    eprintln!("listening on http://{}", service.local_addr());
    let _ = tokio::signal::ctrl_c().await;
    service.shutdown();
    service.wait().await
}
