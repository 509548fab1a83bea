//! HTTP/WebSocket session service.
//!
//! Each session is persisted as `<data_dir>/<id>/manifest.json` plus the
//! append-only `events.jsonl`; on startup every session is rebuilt by
//! replaying its log. Engine calls for one session are serialized behind a
//! mutex and run on the blocking pool.

use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{broadcast, oneshot};
use trackany_core::davis::{open_davis_sequence, RESOLUTION_DIR};
use trackany_core::engine::{
    replay_with_clock, EngineConfig, EngineError, EventBody, QualityReport, Session, SessionOptions, SessionPhase,
    SessionState, StepOutcome, SystemClock, ENGINE_VERSION,
};
use trackany_core::mask::{FrameRef, FrameSource};
use trackany_core::pngio::{voc_colormap, write_mask_png};
use trackany_core::LabelMap;
use trackany_remote::protocol::PointMsg;
use uuid::Uuid;

use crate::backends::BackendConfig;
use crate::error::CliError;

const OVERLAY_ALPHA: u8 = 128;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    pub backend: BackendConfig,
    pub engine: EngineConfig,
    /// Track in the background after start/resume until paused or out of
    /// frames. Otherwise frames advance only through the step endpoint.
    pub autoplay: bool,
    /// Static UI bundle served at `/`.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub id: Uuid,
    pub video_dir: PathBuf,
    pub backend: BackendConfig,
    pub state: SessionState,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub log_path: PathBuf,
}

/// One message per tracked frame on the session stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamMsg {
    pub frame: usize,
    pub mask_png_b64: String,
    pub quality: Vec<QualityReport>,
    pub refined: bool,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

struct Handle {
    id: Uuid,
    video_dir: PathBuf,
    dir: PathBuf,
    created_ms: u64,
    session: Mutex<Session>,
    /// Stream messages so far, for late subscribers.
    history: Mutex<Vec<StreamMsg>>,
    stream: broadcast::Sender<StreamMsg>,
    driving: AtomicBool,
}

impl Handle {
    fn manifest(&self, session: &Session) -> SessionManifest {
        SessionManifest {
            id: self.id,
            video_dir: self.video_dir.clone(),
            backend: BackendConfig::from_description(&session.log().header().backend).expect("written by this service"),
            state: session.state(),
            created_ms: self.created_ms,
            updated_ms: now_ms(),
            log_path: self.dir.join("events.jsonl"),
        }
    }

    fn persist(&self, session: &Session) -> Result<SessionManifest, ApiError> {
        let manifest = self.manifest(session);
        write_manifest(&self.dir, &manifest).map_err(ApiError::internal)?;
        Ok(manifest)
    }

    fn publish(&self, msg: StreamMsg) {
        self.history.lock().expect("history lock").push(msg.clone());
        self.stream.send(msg).ok();
    }
}

fn write_manifest(dir: &Path, manifest: &SessionManifest) -> std::io::Result<()> {
    let tmp = dir.join("manifest.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(manifest).expect("manifest serializes"))?;
    fs::rename(tmp, dir.join("manifest.json"))
}

fn stream_msg(outcome: &StepOutcome) -> StreamMsg {
    StreamMsg {
        frame: outcome.frame,
        mask_png_b64: B64.encode(write_mask_png(&outcome.label_map).expect("valid map")),
        quality: outcome.reports.clone(),
        refined: !outcome.refined.is_empty(),
    }
}

/// Stream messages implied by a (replayed) session's log and masks.
fn rebuild_history(session: &Session) -> Vec<StreamMsg> {
    let mut out: Vec<StreamMsg> = Vec::new();
    for e in session.log().events() {
        match &e.body {
            EventBody::Assessed { reports } => {
                out.retain(|m| m.frame != e.frame);
                out.push(StreamMsg {
                    frame: e.frame,
                    mask_png_b64: String::new(),
                    quality: reports.clone(),
                    refined: false,
                });
            }
            EventBody::Refined { accepted: true, .. } => {
                if let Some(m) = out.iter_mut().rev().find(|m| m.frame == e.frame) {
                    m.refined = true;
                }
            }
            _ => {}
        }
    }
    for m in &mut out {
        let map = session.mask(m.frame).expect("tracked");
        m.mask_png_b64 = B64.encode(write_mask_png(map).expect("valid map"));
    }
    out
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl std::fmt::Display) -> Self {
        Self { status, body: json!({ "error": message.to_string(), "code": code }) }
    }

    fn bad_request(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn engine(e: EngineError, session: &Session) -> Self {
        let phase = session.phase();
        let (status, code) = match &e {
            EngineError::WrongPhase { .. } => (StatusCode::CONFLICT, "wrong_phase"),
            EngineError::FrameMismatch { .. } => (StatusCode::CONFLICT, "frame_mismatch"),
            EngineError::NoFramesRemaining => (StatusCode::CONFLICT, "no_frames_remaining"),
            EngineError::UnknownObject(_) => (StatusCode::NOT_FOUND, "unknown_object"),
            EngineError::Backend { .. } => (StatusCode::BAD_GATEWAY, "backend"),
            EngineError::EmptyMask => (StatusCode::UNPROCESSABLE_ENTITY, "empty_mask"),
            _ => (StatusCode::BAD_REQUEST, "invalid"),
        };
        let mut err = Self::new(status, code, &e);
        err.body["phase"] = json!(phase);
        err.body["current_frame"] = json!(session.current_frame());
        err.body["click_frame"] = json!(session.click_frame());
        if let EngineError::WrongPhase { op, .. } = e {
            err.body["op"] = json!(op);
        }
        err
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    config: ServeConfig,
    sessions: RwLock<HashMap<Uuid, Arc<Handle>>>,
}

impl AppState {
    fn handle(&self, id: &str) -> ApiResult<Arc<Handle>> {
        let uuid = Uuid::parse_str(id).map_err(|_| ApiError::not_found(format!("no session {id}")))?;
        self.sessions
            .read()
            .expect("sessions lock")
            .get(&uuid)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }
}

/// Frames of `dir` plus groundtruth when `dir` is a sequence inside a DAVIS
/// tree. Any other directory is read as sorted `.jpg`/`.png` frames.
pub fn open_video(dir: &Path) -> Result<(Vec<FrameRef>, Option<Vec<LabelMap>>), CliError> {
    let seq = dir.file_name().and_then(|n| n.to_str()).unwrap_or("video").to_string();
    let res = dir.parent();
    let images = res.and_then(Path::parent);
    let is_davis = res.and_then(|p| p.file_name()) == Some(RESOLUTION_DIR.as_ref())
        && images.and_then(|p| p.file_name()) == Some("JPEGImages".as_ref());
    if is_davis {
        let root = images.and_then(Path::parent).expect("JPEGImages has a parent");
        let s = open_davis_sequence(root, &seq)?;
        let gt = s.groundtruth();
        return Ok((s.frames, gt));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("jpg" | "jpeg" | "png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("{} holds no frames", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for (i, path) in paths.into_iter().enumerate() {
        let (width, height) = image::image_dimensions(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        frames.push(FrameRef { sequence_id: seq.clone(), frame_index: i, width, height, source: FrameSource::File(path) });
    }
    Ok((frames, None))
}

fn open_log_sink(path: &Path) -> std::io::Result<Box<dyn std::io::Write + Send>> {
    Ok(Box::new(fs::OpenOptions::new().create(true).append(true).open(path)?))
}

fn create_session(state: &AppState, video_dir: PathBuf) -> ApiResult<Arc<Handle>> {
    let (frames, gt) = open_video(&video_dir).map_err(ApiError::bad_request)?;
    let backend = &state.config.backend;
    let backends = backend.build(&frames[0].sequence_id, gt).map_err(ApiError::bad_request)?;
    let id = Uuid::new_v4();
    let dir = state.config.data_dir.join(id.to_string());
    fs::create_dir_all(&dir).map_err(ApiError::internal)?;
    let sink = open_log_sink(&dir.join("events.jsonl")).map_err(ApiError::internal)?;
    let options = SessionOptions { clock: Box::new(SystemClock), sink: Some(sink), backend: backend.describe() };
    let session = Session::new(frames, backends.segmenter, backends.propagator, state.config.engine.clone(), options)
        .map_err(ApiError::bad_request)?;
    let handle = Arc::new(Handle {
        id,
        video_dir,
        dir,
        created_ms: now_ms(),
        session: Mutex::new(session),
        history: Mutex::default(),
        stream: broadcast::channel(256).0,
        driving: AtomicBool::new(false),
    });
    handle.persist(&handle.session.lock().expect("session lock"))?;
    state.sessions.write().expect("sessions lock").insert(id, handle.clone());
    Ok(handle)
}

/// Rebuilds one persisted session from its manifest and log.
fn restore_session(dir: &Path) -> Result<Arc<Handle>, CliError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(CliError::io(&manifest_path))?;
    let manifest: SessionManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    let log_path = dir.join("events.jsonl");
    let log = fs::read_to_string(&log_path).map_err(CliError::io(&log_path))?;
    let (frames, gt) = open_video(&manifest.video_dir)?;
    let backends = manifest.backend.build(&frames[0].sequence_id, gt)?;
    let mut session = replay_with_clock(&log, frames, backends.segmenter, backends.propagator, Box::new(SystemClock))?;
    session.log_mut().attach_sink(open_log_sink(&log_path).map_err(CliError::io(&log_path))?);
    let history = rebuild_history(&session);
    Ok(Arc::new(Handle {
        id: manifest.id,
        video_dir: manifest.video_dir,
        dir: dir.to_path_buf(),
        created_ms: manifest.created_ms,
        session: Mutex::new(session),
        history: Mutex::new(history),
        stream: broadcast::channel(256).0,
        driving: AtomicBool::new(false),
    }))
}

/// Restores every session under `data_dir`. Sessions that fail to replay
/// are skipped with a warning.
fn restore_all(data_dir: &Path) -> HashMap<Uuid, Arc<Handle>> {
    let mut out = HashMap::new();
    let Ok(entries) = fs::read_dir(data_dir) else { return out };
    for entry in entries.filter_map(|e| e.ok()) {
        let dir = entry.path();
        if !dir.join("manifest.json").is_file() {
            continue;
        }
        match restore_session(&dir) {
            Ok(handle) => {
                tracing::info!(session = %handle.id, "session restored from log");
                out.insert(handle.id, handle);
            }
            Err(e) => tracing::warn!(dir = %dir.display(), error = %e, "cannot restore session"),
        }
    }
    out
}

/// Runs `f` on the blocking pool with the session locked, then persists the
/// manifest.
async fn with_session<R: Send + 'static>(
    handle: Arc<Handle>,
    f: impl FnOnce(&mut Session) -> Result<R, EngineError> + Send + 'static,
) -> ApiResult<(R, SessionManifest)> {
    tokio::task::spawn_blocking(move || {
        let mut session = handle.session.lock().expect("session lock");
        let result = f(&mut session);
        let manifest = handle.persist(&session)?;
        match result {
            Ok(r) => Ok((r, manifest)),
            Err(e) => Err(ApiError::engine(e, &session)),
        }
    })
    .await
    .map_err(ApiError::internal)?
}

/// Steps in the background until the session leaves Tracking or runs out
/// of frames. At most one driver runs per session.
fn spawn_driver(handle: Arc<Handle>) {
    if handle.driving.swap(true, Ordering::AcqRel) {
        return;
    }
    tokio::task::spawn_blocking(move || {
        loop {
            let mut session = handle.session.lock().expect("session lock");
            if session.phase() != SessionPhase::Tracking || session.frames_remaining() == 0 {
                break;
            }
            let step = session.track_step();
            if let Err(e) = handle.persist(&session) {
                tracing::error!(session = %handle.id, error = ?e, "cannot persist manifest");
            }
            drop(session);
            match step {
                Ok(outcome) => handle.publish(stream_msg(&outcome)),
                Err(e) => {
                    tracing::warn!(session = %handle.id, error = %e, "tracking stopped");
                    break;
                }
            }
        }
        handle.driving.store(false, Ordering::Release);
    });
}

#[derive(Deserialize)]
struct CreateRequest {
    video_dir: PathBuf,
}

#[derive(Deserialize)]
struct ClickRequest {
    frame: usize,
    #[serde(default)]
    object_id: Option<u8>,
    points: Vec<PointMsg>,
}

#[derive(Deserialize)]
struct StreamQuery {
    /// Only frames after this one are sent.
    #[serde(default)]
    from: Option<usize>,
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "ok": true, "engine_version": ENGINE_VERSION }))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<SessionManifest>>> {
    let handles: Vec<Arc<Handle>> = state.sessions.read().expect("sessions lock").values().cloned().collect();
    let manifests = tokio::task::spawn_blocking(move || {
        let mut out: Vec<SessionManifest> =
            handles.iter().map(|h| h.manifest(&h.session.lock().expect("session lock"))).collect();
        out.sort_by_key(|m| (m.created_ms, m.id));
        out
    })
    .await
    .map_err(ApiError::internal)?;
    Ok(Json(manifests))
}

async fn post_session(State(state): State<Arc<AppState>>, Json(req): Json<CreateRequest>) -> ApiResult<Response> {
    let manifest = tokio::task::spawn_blocking(move || {
        let handle = create_session(&state, req.video_dir)?;
        let session = handle.session.lock().expect("session lock");
        Ok::<_, ApiError>(handle.manifest(&session))
    })
    .await
    .map_err(ApiError::internal)??;
    Ok((StatusCode::CREATED, Json(manifest)).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionManifest>> {
    let handle = state.handle(&id)?;
    let ((), manifest) = with_session(handle, |_| Ok(())).await?;
    Ok(Json(manifest))
}

async fn get_log(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let reader = {
        let handle = state.handle(&id)?;
        let session = handle.session.lock().expect("session lock");
        session.log().reader()
    };
    let mut text = reader.snapshot().join("\n");
    text.push('\n');
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn post_clicks(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ClickRequest>,
) -> ApiResult<Response> {
    let handle = state.handle(&id)?;
    let points: Vec<_> = req.points.iter().map(|p| p.to_prompt()).collect();
    let ((object_id, map), manifest) = with_session(handle, move |s| {
        if matches!(s.phase(), SessionPhase::Tracking | SessionPhase::Finished) {
            return Err(EngineError::WrongPhase { op: "clicks", phase: s.phase() });
        }
        s.check_click_frame(req.frame)?;
        match (s.phase(), req.object_id) {
            (SessionPhase::Paused, Some(id)) if s.objects().contains_key(&id) => {
                s.correct(id, points).map(|map| (id, map))
            }
            _ => s.add_clicks(req.object_id, points),
        }
    })
    .await?;
    let png = write_mask_png(&map).map_err(ApiError::internal)?;
    let mut resp = ([(header::CONTENT_TYPE, "image/png")], png).into_response();
    let headers = resp.headers_mut();
    headers.insert("x-object-id", HeaderValue::from(u16::from(object_id)));
    headers.insert("x-phase", HeaderValue::from_str(&manifest.state.phase.to_string()).expect("ascii"));
    Ok(resp)
}

async fn transition(
    state: Arc<AppState>,
    id: String,
    op: impl FnOnce(&mut Session) -> Result<(), EngineError> + Send + 'static,
    drive: bool,
) -> ApiResult<Json<SessionManifest>> {
    let handle = state.handle(&id)?;
    let ((), manifest) = with_session(handle.clone(), op).await?;
    if drive && state.config.autoplay {
        spawn_driver(handle);
    }
    Ok(Json(manifest))
}

async fn post_start(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionManifest>> {
    transition(state, id, Session::start, true).await
}

async fn post_pause(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionManifest>> {
    transition(state, id, Session::pause, false).await
}

async fn post_resume(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionManifest>> {
    transition(state, id, Session::resume, true).await
}

async fn post_finish(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionManifest>> {
    transition(state, id, Session::finish, false).await
}

/// Advances exactly one frame.
async fn post_step(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<StreamMsg>> {
    let handle = state.handle(&id)?;
    let (msg, _) = with_session(handle.clone(), |s| s.track_step().map(|o| stream_msg(&o))).await?;
    handle.publish(msg.clone());
    Ok(Json(msg))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()
}

async fn get_overlay(
    State(state): State<Arc<AppState>>,
    UrlPath((id, index)): UrlPath<(String, usize)>,
) -> ApiResult<Response> {
    let handle = state.handle(&id)?;
    let png = tokio::task::spawn_blocking(move || {
        let session = handle.session.lock().expect("session lock");
        let frame = session.video().get(index).ok_or_else(|| ApiError::not_found(format!("no frame {index}")))?;
        let (w, h) = (frame.width, frame.height);
        let colors = voc_colormap();
        let img = match session.mask(index) {
            Some(map) => image::RgbaImage::from_fn(w, h, |x, y| match map.get(x, y) {
                0 => image::Rgba([0, 0, 0, 0]),
                l => {
                    let [r, g, b] = colors[l as usize];
                    image::Rgba([r, g, b, OVERLAY_ALPHA])
                }
            }),
            None => image::RgbaImage::new(w, h),
        };
        let mut png = Vec::new();
        img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png).map_err(ApiError::internal)?;
        Ok::<_, ApiError>(png)
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(png_response(png))
}

async fn get_frame_image(
    State(state): State<Arc<AppState>>,
    UrlPath((id, index)): UrlPath<(String, usize)>,
) -> ApiResult<Response> {
    let handle = state.handle(&id)?;
    let frame = {
        let session = handle.session.lock().expect("session lock");
        session.video().get(index).cloned().ok_or_else(|| ApiError::not_found(format!("no frame {index}")))?
    };
    let png = tokio::task::spawn_blocking(move || {
        let rgb = frame.load_rgb().map_err(ApiError::internal)?;
        let mut png = Vec::new();
        rgb.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png).map_err(ApiError::internal)?;
        Ok::<_, ApiError>(png)
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(png_response(png))
}

async fn get_stream(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let handle = state.handle(&id)?;
    Ok(ws.on_upgrade(move |socket| stream_frames(socket, handle, q.from)))
}

async fn send(socket: &mut WebSocket, msg: &StreamMsg) -> bool {
    let text = serde_json::to_string(msg).expect("stream message serializes");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn send_after(socket: &mut WebSocket, msgs: &[StreamMsg], last: &mut Option<usize>) -> bool {
    for msg in msgs {
        if last.is_some_and(|l| msg.frame <= l) {
            continue;
        }
        if !send(socket, msg).await {
            return false;
        }
        *last = Some(msg.frame);
    }
    true
}

/// Backlog first, then live frames, each frame at most once and in
/// increasing order.
async fn stream_frames(mut socket: WebSocket, handle: Arc<Handle>, from: Option<usize>) {
    let mut rx = handle.stream.subscribe();
    let mut last = from;
    let backlog: Vec<StreamMsg> = handle.history.lock().expect("history lock").clone();
    if !send_after(&mut socket, &backlog, &mut last).await {
        return;
    }
    loop {
        tokio::select! {
            received = rx.recv() => match received {
                Ok(msg) => {
                    if !send_after(&mut socket, std::slice::from_ref(&msg), &mut last).await {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    let backlog: Vec<StreamMsg> = handle.history.lock().expect("history lock").clone();
                    if !send_after(&mut socket, &backlog, &mut last).await {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let ui_dir = state.config.ui_dir.clone();
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", get(list_sessions).post(post_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/log", get(get_log))
        .route("/v1/sessions/{id}/clicks", post(post_clicks))
        .route("/v1/sessions/{id}/start", post(post_start))
        .route("/v1/sessions/{id}/pause", post(post_pause))
        .route("/v1/sessions/{id}/resume", post(post_resume))
        .route("/v1/sessions/{id}/finish", post(post_finish))
        .route("/v1/sessions/{id}/step", post(post_step))
        .route("/v1/sessions/{id}/frames/{index}/overlay.png", get(get_overlay))
        .route("/v1/sessions/{id}/frames/{index}/image.png", get(get_frame_image))
        .route("/v1/sessions/{id}/stream", get(get_stream))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Validates the config, contacts the backend and restores persisted
/// sessions.
pub fn prepare(config: ServeConfig) -> Result<Arc<AppState>, CliError> {
    config.engine.validate().map_err(|e| CliError::Config(e.to_string()))?;
    config.backend.handshake()?;
    fs::create_dir_all(&config.data_dir).map_err(CliError::io(&config.data_dir))?;
    let sessions = restore_all(&config.data_dir);
    Ok(Arc::new(AppState { config, sessions: RwLock::new(sessions) }))
}

/// A service running on a background thread. Stops when dropped.
pub struct RunningService {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl RunningService {
    pub fn start(config: ServeConfig) -> Result<Self, CliError> {
        let listener = std::net::TcpListener::bind(&config.bind).map_err(CliError::io(&config.bind))?;
        listener.set_nonblocking(true).map_err(CliError::io(&config.bind))?;
        let addr = listener.local_addr().map_err(CliError::io(&config.bind))?;
        let state = prepare(config)?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .map_err(|e| CliError::Config(format!("runtime: {e}")))?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name("trackany-service".into())
            .spawn(move || {
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                    let serve = axum::serve(listener, router(state)).with_graceful_shutdown(async {
                        rx.await.ok();
                    });
                    if let Err(e) = serve.await {
                        tracing::error!(error = %e, "service stopped");
                    }
                });
                runtime.shutdown_background();
            })
            .map_err(|e| CliError::Config(format!("service thread: {e}")))?;
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            tx.send(()).ok();
        }
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

/// Serves until interrupted.
pub async fn serve(config: ServeConfig) -> Result<(), CliError> {
    let bind = config.bind.clone();
    let listener = tokio::net::TcpListener::bind(&bind).await.map_err(CliError::io(&bind))?;
    let state = tokio::task::spawn_blocking(move || prepare(config))
        .await
        .map_err(|e| CliError::Config(e.to_string()))??;
    tracing::info!(addr = %listener.local_addr().map_err(CliError::io(&bind))?, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await
        .map_err(CliError::io(&bind))
}
