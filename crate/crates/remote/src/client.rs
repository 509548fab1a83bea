//! Blocking HTTP client backends.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use trackany_core::backend::{BackendError, PropagateResult, Propagator, SegmentRequest, SegmentResult, Segmenter};
use trackany_core::mask::{FrameRef, LabelMap};
use trackany_core::prompts::AffinityField;

use crate::protocol::*;

/// Largest response body accepted, in bytes.
const BODY_LIMIT: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct RemoteConfig {
    pub base_url: String,
    /// Per-attempt timeout.
    pub timeout: Duration,
    /// Extra attempts after the first on timeouts, connection failures and
    /// 5xx/429 responses.
    pub retries: u32,
    /// Delay before the first retry; doubles on each later one.
    pub backoff: Duration,
    /// Reject affinity values outside [0, 1] instead of clamping them.
    pub strict: bool,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(200),
            strict: true,
        }
    }
}

fn schema(e: impl std::fmt::Display) -> BackendError {
    BackendError::Schema(e.to_string())
}

/// JSON-over-HTTP transport with bounded retries.
#[derive(Clone, Debug)]
pub struct RemoteClient {
    agent: ureq::Agent,
    config: RemoteConfig,
}

enum Attempt<T> {
    Done(Result<T, BackendError>),
    Retry(BackendError),
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, config }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.base_url)
    }

    fn read<T: DeserializeOwned>(mut response: ureq::http::Response<ureq::Body>) -> Attempt<T> {
        let status = response.status().as_u16();
        let body = match response.body_mut().with_config().limit(BODY_LIMIT).read_to_string() {
            Ok(b) => b,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(BackendError::Timeout { attempts: 1 }),
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        if (200..300).contains(&status) {
            return Attempt::Done(serde_json::from_str(&body).map_err(schema));
        }
        if status >= 500 || status == 429 {
            let retry_after = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Attempt::Retry(BackendError::Unavailable {
                attempts: 1,
                retry_after,
                message: format!("status {status}: {body}"),
            });
        }
        Attempt::Done(Err(BackendError::Status { status, body }))
    }

    fn with_retries<T>(&self, mut attempt: impl FnMut() -> Attempt<T>) -> Result<T, BackendError> {
        let total = self.config.retries + 1;
        let mut delay = self.config.backoff;
        for n in 1..=total {
            let err = match attempt() {
                Attempt::Done(r) => return r,
                Attempt::Retry(e) => e,
            };
            if n == total {
                return Err(match err {
                    BackendError::Timeout { .. } => BackendError::Timeout { attempts: n },
                    BackendError::Unavailable { retry_after, message, .. } => {
                        BackendError::Unavailable { attempts: n, retry_after, message }
                    }
                    BackendError::Transport(message) => BackendError::Unavailable { attempts: n, retry_after: None, message },
                    other => other,
                });
            }
            let wait = match &err {
                BackendError::Unavailable { retry_after: Some(r), .. } => (*r).max(delay).min(self.config.timeout),
                _ => delay,
            };
            tracing::debug!(attempt = n, error = %err, wait_ms = wait.as_millis() as u64, "retrying backend request");
            thread::sleep(wait);
            delay *= 2;
        }
        unreachable!("loop returns on the last attempt")
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, BackendError> {
        let url = self.url(path);
        let payload = serde_json::to_vec(body).map_err(|e| BackendError::Transport(e.to_string()))?;
        self.with_retries(|| {
            let sent = self.agent.post(&url).header("content-type", "application/json").send(&payload[..]);
            match sent {
                Ok(resp) => Self::read(resp),
                Err(ureq::Error::Timeout(_)) => Attempt::Retry(BackendError::Timeout { attempts: 1 }),
                Err(e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound)) => {
                    Attempt::Retry(BackendError::Transport(e.to_string()))
                }
                Err(e) => Attempt::Done(Err(BackendError::Transport(e.to_string()))),
            }
        })
    }

    pub fn health(&self) -> Result<HealthMsg, BackendError> {
        let url = self.url("/v1/health");
        self.with_retries(|| match self.agent.get(&url).call() {
            Ok(resp) => Self::read(resp),
            Err(ureq::Error::Timeout(_)) => Attempt::Retry(BackendError::Timeout { attempts: 1 }),
            Err(e) => Attempt::Retry(BackendError::Transport(e.to_string())),
        })
    }
}

fn frame_msg(frame: &FrameRef) -> Result<FrameMsg, BackendError> {
    encode_frame(frame).map_err(|e| BackendError::MalformedPrompt(format!("cannot encode frame: {e}")))
}

/// Segmenter served over `POST /v1/segment`.
#[derive(Clone, Debug)]
pub struct RemoteSegmenter {
    client: RemoteClient,
}

impl RemoteSegmenter {
    pub fn new(client: RemoteClient) -> Self {
        Self { client }
    }
}

impl Segmenter for RemoteSegmenter {
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<SegmentResult, BackendError> {
        request.validate()?;
        let frame = request.frame;
        let msg = SegmentRequestMsg {
            frame: frame_msg(frame)?,
            points: request.points.iter().map(PointMsg::from).collect(),
            bbox: request.bbox.map(BoxMsg::from),
            mask_prompt: request.mask_prompt.map(MaskPromptMsg::from),
        };
        let resp: SegmentResponseMsg = self.client.post("/v1/segment", &msg)?;
        let mask = decode_mask(&resp.mask_png_b64).map_err(schema)?;
        if mask.dims() != (frame.width, frame.height) {
            return Err(schema(format!(
                "mask is {:?}, frame is {}x{}",
                mask.dims(),
                frame.width,
                frame.height
            )));
        }
        if !(0.0..=1.0).contains(&resp.confidence) {
            return Err(schema(format!("confidence {} outside [0, 1]", resp.confidence)));
        }
        Ok(SegmentResult { mask, confidence: resp.confidence })
    }
}

/// Propagator served over `/v1/propagate/*`. All state lives on the server
/// under a per-instance session id.
#[derive(Clone, Debug)]
pub struct RemotePropagator {
    client: RemoteClient,
    session: String,
}

impl RemotePropagator {
    pub fn new(client: RemoteClient) -> Self {
        Self::with_session(client, uuid::Uuid::new_v4().to_string())
    }

    pub fn with_session(client: RemoteClient, session: impl Into<String>) -> Self {
        Self { client, session: session.into() }
    }

    pub fn session(&self) -> &str {
        &self.session
    }

    fn anchor(&self, path: &str, frame: &FrameRef, map: &LabelMap) -> Result<(), BackendError> {
        let msg = AnchorRequestMsg {
            session: self.session.clone(),
            frame: frame_msg(frame)?,
            labelmap_png_b64: encode_labelmap(map).map_err(|e| BackendError::InvalidMap(e.to_string()))?,
        };
        let resp: OkMsg = self.client.post(path, &msg)?;
        if !resp.ok {
            return Err(schema("server answered ok=false"));
        }
        Ok(())
    }

    fn decode_step(&self, frame: &FrameRef, resp: StepResponseMsg) -> Result<PropagateResult, BackendError> {
        let label_map = decode_labelmap(&resp.labelmap_png_b64).map_err(schema)?;
        let dims = (frame.width, frame.height);
        if label_map.dims() != dims {
            return Err(schema(format!("label map is {:?}, frame is {dims:?}", label_map.dims())));
        }
        let mut affinities = Vec::with_capacity(resp.affinities.len());
        for a in resp.affinities {
            if (a.w, a.h) != dims {
                return Err(schema(format!("affinity {} is {}x{}, frame is {dims:?}", a.object_id, a.w, a.h)));
            }
            let mut values = decode_f32le(&a.f32le_b64, a.w as usize * a.h as usize).map_err(schema)?;
            let bad = values.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
            if bad > 0 {
                if self.client.config.strict {
                    return Err(schema(format!("affinity {} has {bad} values outside [0, 1]", a.object_id)));
                }
                tracing::warn!(object = a.object_id, count = bad, "clamping out-of-range affinity values");
                for v in values.iter_mut() {
                    *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                }
            }
            affinities.push(AffinityField::new(a.object_id, a.w, a.h, values).map_err(schema)?);
        }
        let result = PropagateResult { label_map, affinities };
        result.validate()?;
        Ok(result)
    }
}

impl Propagator for RemotePropagator {
    fn init(&mut self, frame: &FrameRef, map: &LabelMap) -> Result<(), BackendError> {
        self.anchor("/v1/propagate/init", frame, map)
    }

    fn step(&mut self, frame: &FrameRef) -> Result<PropagateResult, BackendError> {
        let msg = StepRequestMsg { session: self.session.clone(), frame: frame_msg(frame)? };
        let resp: StepResponseMsg = self.client.post("/v1/propagate/step", &msg)?;
        self.decode_step(frame, resp)
    }

    fn re_anchor(&mut self, frame: &FrameRef, map: &LabelMap) -> Result<(), BackendError> {
        self.anchor("/v1/propagate/reanchor", frame, map)
    }
}
