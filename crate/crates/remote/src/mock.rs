//! In-process mock model server speaking the wire protocol over the
//! synthetic backends, with scripted fault injection.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;
use trackany_core::backend::{
    BackendError, DegradationConfig, PropagateResult, Propagator, SegmentRequest, Segmenter, SyntheticOraclePropagator,
    SyntheticScene, SyntheticSegmenter,
};
use trackany_core::engine::ENGINE_VERSION;
use trackany_core::mask::{FrameRef, LabelMap};

use crate::protocol::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    Health,
    Segment,
    Init,
    Step,
    Reanchor,
}

/// A scripted misbehaviour applied to the next matching requests.
#[derive(Clone, Debug, PartialEq)]
pub enum Fault {
    /// Answer with this status and an error body.
    Status { code: u16, retry_after: Option<u64> },
    /// Sleep before answering normally.
    Delay(Duration),
    /// Widen the returned raster by one column.
    WrongDims,
    /// Overwrite the first affinity value of every object.
    AffinityValue(f32),
    BadConfidence(f64),
    /// 200 with a body that is not JSON.
    Garbage,
}

#[derive(Debug)]
struct Scripted {
    route: Route,
    fault: Fault,
    remaining: usize,
}

struct MockState {
    scene: SyntheticScene,
    segmenter: SyntheticSegmenter,
    degradation: DegradationConfig,
    sessions: Mutex<HashMap<String, SyntheticOraclePropagator>>,
    faults: Mutex<Vec<Scripted>>,
    hits: Mutex<HashMap<Route, usize>>,
}

impl MockState {
    /// Counts the hit and pops the first scripted fault for `route`.
    fn enter(&self, route: Route) -> Option<Fault> {
        *self.hits.lock().unwrap().entry(route).or_default() += 1;
        let mut faults = self.faults.lock().unwrap();
        let i = faults.iter().position(|s| s.route == route)?;
        let fault = faults[i].fault.clone();
        faults[i].remaining -= 1;
        if faults[i].remaining == 0 {
            faults.remove(i);
        }
        Some(fault)
    }
}

type ApiResult = Result<Response, Response>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorMsg { error: message.into() })).into_response()
}

fn bad_request(e: impl std::fmt::Display) -> Response {
    error(StatusCode::BAD_REQUEST, e.to_string())
}

fn backend_status(e: &BackendError) -> StatusCode {
    match e {
        BackendError::NotInitialized | BackendError::OutOfOrder { .. } => StatusCode::CONFLICT,
        BackendError::BeyondSequence { .. } | BackendError::UnknownFrame { .. } => StatusCode::NOT_FOUND,
        _ => StatusCode::BAD_REQUEST,
    }
}

fn backend_error(e: BackendError) -> Response {
    error(backend_status(&e), e.to_string())
}

/// Handles faults that replace the response outright. Returns the fault
/// back when it must be applied to a normal response instead.
async fn preempt(fault: Option<Fault>) -> Result<Option<Fault>, Response> {
    match fault {
        Some(Fault::Status { code, retry_after }) => {
            let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            let mut resp = error(status, format!("injected status {code}"));
            if let Some(s) = retry_after {
                resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(s));
            }
            Err(resp)
        }
        Some(Fault::Delay(d)) => {
            tokio::time::sleep(d).await;
            Ok(None)
        }
        Some(Fault::Garbage) => Err((StatusCode::OK, "not json {").into_response()),
        other => Ok(other),
    }
}

fn widen(map: &LabelMap) -> LabelMap {
    let (w, h) = map.dims();
    let mut labels = Vec::with_capacity(((w + 1) * h) as usize);
    for row in map.labels().chunks(w as usize) {
        labels.extend_from_slice(row);
        labels.push(0);
    }
    LabelMap::from_raster(w + 1, h, labels).expect("widened map")
}

async fn health(State(state): State<Arc<MockState>>) -> ApiResult {
    preempt(state.enter(Route::Health)).await?;
    Ok(Json(HealthMsg { ok: true, engine_version: ENGINE_VERSION.to_string() }).into_response())
}

async fn segment(State(state): State<Arc<MockState>>, Json(msg): Json<SegmentRequestMsg>) -> ApiResult {
    let fault = preempt(state.enter(Route::Segment)).await?;
    let frame = decode_frame(&msg.frame).map_err(bad_request)?;
    let points: Vec<_> = msg.points.iter().map(|p| p.to_prompt()).collect();
    let mask_prompt = msg.mask_prompt.as_ref().map(|m| m.to_prompt()).transpose().map_err(bad_request)?;
    let request = SegmentRequest {
        frame: &frame,
        points: &points,
        bbox: msg.bbox.map(Into::into),
        mask_prompt: mask_prompt.as_ref(),
    };
    let mut result = state.segmenter.segment(&request).map_err(backend_error)?;
    let mut mask_png_b64 = encode_mask(&result.mask).map_err(bad_request)?;
    match fault {
        Some(Fault::BadConfidence(c)) => result.confidence = c,
        Some(Fault::WrongDims) => {
            let wide = trackany_core::mask::BinaryMask::empty(result.mask.width() + 1, result.mask.height());
            mask_png_b64 = encode_mask(&wide).map_err(bad_request)?;
        }
        _ => {}
    }
    Ok(Json(SegmentResponseMsg { mask_png_b64, confidence: result.confidence }).into_response())
}

fn decode_anchor(msg: &AnchorRequestMsg) -> Result<(FrameRef, LabelMap), Response> {
    let frame = decode_frame(&msg.frame).map_err(bad_request)?;
    let map = decode_labelmap(&msg.labelmap_png_b64).map_err(bad_request)?;
    Ok((frame, map))
}

async fn init(State(state): State<Arc<MockState>>, Json(msg): Json<AnchorRequestMsg>) -> ApiResult {
    preempt(state.enter(Route::Init)).await?;
    let (frame, map) = decode_anchor(&msg)?;
    let gt = state
        .scene
        .sequence(&frame.sequence_id)
        .ok_or_else(|| backend_error(BackendError::UnknownFrame { sequence: frame.sequence_id.clone(), index: frame.frame_index }))?;
    let mut prop = SyntheticOraclePropagator::new(gt, state.degradation.clone());
    prop.init(&frame, &map).map_err(backend_error)?;
    state.sessions.lock().unwrap().insert(msg.session, prop);
    Ok(Json(OkMsg { ok: true }).into_response())
}

async fn reanchor(State(state): State<Arc<MockState>>, Json(msg): Json<AnchorRequestMsg>) -> ApiResult {
    preempt(state.enter(Route::Reanchor)).await?;
    let (frame, map) = decode_anchor(&msg)?;
    let mut sessions = state.sessions.lock().unwrap();
    let prop = sessions.get_mut(&msg.session).ok_or_else(|| backend_error(BackendError::NotInitialized))?;
    prop.re_anchor(&frame, &map).map_err(backend_error)?;
    Ok(Json(OkMsg { ok: true }).into_response())
}

fn encode_step(result: &PropagateResult, fault: Option<&Fault>) -> Result<StepResponseMsg, Response> {
    let map = match fault {
        Some(Fault::WrongDims) => widen(&result.label_map),
        _ => result.label_map.clone(),
    };
    let affinities = result
        .affinities
        .iter()
        .map(|a| {
            let mut values = a.values().to_vec();
            if let (Some(Fault::AffinityValue(v)), Some(first)) = (fault, values.first_mut()) {
                *first = *v;
            }
            let (w, h) = a.dims();
            AffinityMsg { object_id: a.object_id(), f32le_b64: encode_f32le(&values), w, h }
        })
        .collect();
    Ok(StepResponseMsg { labelmap_png_b64: encode_labelmap(&map).map_err(bad_request)?, affinities })
}

async fn step(State(state): State<Arc<MockState>>, Json(msg): Json<StepRequestMsg>) -> ApiResult {
    let fault = preempt(state.enter(Route::Step)).await?;
    let frame = decode_frame(&msg.frame).map_err(bad_request)?;
    let result = {
        let mut sessions = state.sessions.lock().unwrap();
        let prop = sessions.get_mut(&msg.session).ok_or_else(|| backend_error(BackendError::NotInitialized))?;
        prop.step(&frame).map_err(backend_error)?
    };
    Ok(Json(encode_step(&result, fault.as_ref())?).into_response())
}

fn router(state: Arc<MockState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/segment", post(segment))
        .route("/v1/propagate/init", post(init))
        .route("/v1/propagate/step", post(step))
        .route("/v1/propagate/reanchor", post(reanchor))
        .with_state(state)
}

/// A running mock server. Shuts down when dropped.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds an ephemeral loopback port.
    pub fn start(scene: SyntheticScene, degradation: DegradationConfig) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", scene, degradation)
    }

    pub fn bind(addr: &str, scene: SyntheticScene, degradation: DegradationConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(MockState {
            segmenter: SyntheticSegmenter::new(scene.clone()),
            scene,
            degradation,
            sessions: Mutex::default(),
            faults: Mutex::default(),
            hits: Mutex::default(),
        });
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(state.clone());
        let thread = std::thread::Builder::new().name("mock-server".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!(error = %e, "mock server listener");
                        return;
                    }
                };
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    rx.await.ok();
                });
                if let Err(e) = serve.await {
                    tracing::error!(error = %e, "mock server stopped");
                }
            });
        })?;
        Ok(Self { addr, state, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Applies `fault` to the next `count` requests on `route`. Faults on the
    /// same route are consumed in the order injected.
    pub fn inject(&self, route: Route, fault: Fault, count: usize) {
        if count > 0 {
            self.state.faults.lock().unwrap().push(Scripted { route, fault, remaining: count });
        }
    }

    pub fn clear_faults(&self) {
        self.state.faults.lock().unwrap().clear();
    }

    pub fn hits(&self, route: Route) -> usize {
        self.state.hits.lock().unwrap().get(&route).copied().unwrap_or(0)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            tx.send(()).ok();
        }
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}
