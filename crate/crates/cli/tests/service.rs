use std::fs;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tempfile::TempDir;
use trackany::backends::BackendConfig;
use trackany::service::{RunningService, ServeConfig, SessionManifest, StreamMsg};
use trackany::synth::{make_synthetic_dataset, SynthSpec};
use trackany_core::backend::{DegradationConfig, SyntheticScene};
use trackany_core::davis::open_davis_sequence;
use trackany_core::engine::{parse_log, replay, EngineConfig, EventBody, EventKind, SessionPhase, ENGINE_VERSION};
use trackany_core::mask::{extract_or_empty, LabelMap};
use trackany_core::pngio::{read_mask_png, voc_colormap};
use trackany_core::prompts::simulate_click;
use trackany_remote::MockServer;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

struct Reply {
    status: u16,
    body: Vec<u8>,
    headers: Vec<(String, String)>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    fn map(&self) -> LabelMap {
        assert_eq!(self.header("content-type"), Some("image/png"));
        read_mask_png(&self.body).unwrap()
    }
}

#[derive(Clone)]
struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(base: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self { base, agent }
    }

    fn reply(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
        let mut resp = resp.unwrap();
        let headers = resp
            .headers()
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), v.to_str().unwrap_or_default().to_string()))
            .collect();
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_vec().unwrap();
        Reply { status, body, headers }
    }

    fn get(&self, path: &str) -> Reply {
        Self::reply(self.agent.get(format!("{}{path}", self.base)).call())
    }

    fn post(&self, path: &str, body: &Value) -> Reply {
        Self::reply(self.agent.post(format!("{}{path}", self.base)).send_json(body))
    }

    fn op(&self, id: &str, op: &str) -> Reply {
        Self::reply(self.agent.post(format!("{}/v1/sessions/{id}/{op}", self.base)).send_empty())
    }

    fn create(&self, video_dir: &Path) -> SessionManifest {
        let r = self.post("/v1/sessions", &json!({ "video_dir": video_dir }));
        assert_eq!(r.status, 201, "{}", String::from_utf8_lossy(&r.body));
        serde_json::from_slice(&r.body).unwrap()
    }

    fn clicks(&self, id: &str, frame: usize, object_id: Option<u8>, points: &[(u32, u32, &str)]) -> Reply {
        let points: Vec<Value> = points.iter().map(|&(x, y, p)| json!({ "x": x, "y": y, "polarity": p })).collect();
        let mut body = json!({ "frame": frame, "points": points });
        if let Some(o) = object_id {
            body["object_id"] = json!(o);
        }
        self.post(&format!("/v1/sessions/{id}/clicks"), &body)
    }

    fn manifest(&self, id: &str) -> SessionManifest {
        let r = self.get(&format!("/v1/sessions/{id}"));
        assert_eq!(r.status, 200);
        serde_json::from_slice(&r.body).unwrap()
    }

    fn log(&self, id: &str) -> String {
        let r = self.get(&format!("/v1/sessions/{id}/log"));
        assert_eq!(r.status, 200);
        String::from_utf8(r.body).unwrap()
    }
}

struct Fixture {
    data: TempDir,
    state: TempDir,
    spec: SynthSpec,
}

impl Fixture {
    fn new(spec: SynthSpec) -> Self {
        let data = tempfile::tempdir().unwrap();
        make_synthetic_dataset(&spec, data.path()).unwrap();
        Self { data, state: tempfile::tempdir().unwrap(), spec }
    }

    fn video(&self, s: usize) -> PathBuf {
        self.data.path().join("JPEGImages/480p").join(self.spec.sequence_id(s))
    }

    fn gt(&self, s: usize) -> Vec<LabelMap> {
        open_davis_sequence(self.data.path(), &self.spec.sequence_id(s)).unwrap().groundtruth().unwrap()
    }

    fn config(&self, backend: BackendConfig, autoplay: bool) -> ServeConfig {
        let engine = EngineConfig { refine: false, ..EngineConfig::default() };
        ServeConfig {
            bind: "127.0.0.1:0".into(),
            data_dir: self.state.path().to_path_buf(),
            backend,
            engine,
            autoplay,
            ui_dir: None,
        }
    }

    fn start(&self, erosion: f64, autoplay: bool) -> (RunningService, Client) {
        let svc = RunningService::start(self.config(synthetic(erosion), autoplay)).unwrap();
        let client = Client::new(svc.url());
        (svc, client)
    }
}

fn synthetic(erosion: f64) -> BackendConfig {
    BackendConfig::Synthetic { degradation: DegradationConfig::new(erosion, 16.0).unwrap() }
}

/// Pole click on object `id` of `gt`.
fn click_on(gt: &LabelMap, id: u8) -> (u32, u32, &'static str) {
    let p = simulate_click(&extract_or_empty(gt, id), None, id).unwrap().unwrap();
    (p.x, p.y, "positive")
}

fn short_spec() -> SynthSpec {
    SynthSpec { sequences: 2, frames: 10, ..SynthSpec::default() }
}

#[test]
fn health_reports_engine_version() {
    let fx = Fixture::new(short_spec());
    let (_svc, c) = fx.start(0.0, false);
    let r = c.get("/v1/health");
    assert_eq!(r.status, 200);
    assert_eq!(r.json(), json!({ "ok": true, "engine_version": ENGINE_VERSION }));
}

#[test]
fn clicks_dispatch_on_phase_and_phase_errors_are_409() {
    let fx = Fixture::new(short_spec());
    let gt = fx.gt(0);
    let (_svc, c) = fx.start(1.0, false);
    let m = c.create(&fx.video(0));
    let id = m.id.to_string();
    assert_eq!(m.state.phase, SessionPhase::Idle);
    assert!(m.log_path.is_file());

    // Idle: init path, fresh ids in click order.
    let r = c.clicks(&id, 0, None, &[click_on(&gt[0], 1)]);
    assert_eq!(r.status, 200);
    assert_eq!((r.header("x-object-id"), r.header("x-phase")), (Some("1"), Some("initialized")));
    assert_eq!(extract_or_empty(&r.map(), 1), extract_or_empty(&gt[0], 1));
    let r = c.clicks(&id, 0, None, &[click_on(&gt[0], 2)]);
    assert_eq!(r.header("x-object-id"), Some("2"));
    assert_eq!(r.map(), gt[0]);

    let r = c.clicks(&id, 3, Some(1), &[(1, 1, "positive")]);
    assert_eq!(r.status, 409);
    assert_eq!((r.json()["code"].clone(), r.json()["click_frame"].clone()), (json!("frame_mismatch"), json!(0)));
    let r = c.op(&id, "pause");
    assert_eq!(r.status, 409);
    assert_eq!(r.json()["phase"], "initialized");
    assert_eq!(r.json()["op"], "pause");

    assert_eq!(c.op(&id, "start").json()["state"]["phase"], "tracking");
    let r = c.clicks(&id, 0, Some(1), &[click_on(&gt[0], 1)]);
    assert_eq!(r.status, 409);
    assert_eq!((r.json()["code"].clone(), r.json()["phase"].clone()), (json!("wrong_phase"), json!("tracking")));

    for t in 1..=5 {
        let msg: StreamMsg = serde_json::from_slice(&c.op(&id, "step").body).unwrap();
        assert_eq!(msg.frame, t);
        assert_eq!(msg.quality.len(), 2);
    }
    assert_eq!(c.op(&id, "pause").json()["state"]["phase"], "paused");

    // Paused with a known object: the correct path restores the eroded mask.
    assert_eq!(c.manifest(&id).state.current_frame, 5);
    assert_eq!(c.clicks(&id, 4, Some(1), &[click_on(&gt[5], 1)]).json()["code"], "frame_mismatch");
    let r = c.clicks(&id, 5, Some(1), &[click_on(&gt[5], 1)]);
    assert_eq!(r.status, 200);
    assert_eq!(r.header("x-object-id"), Some("1"));
    assert_eq!(extract_or_empty(&r.map(), 1), extract_or_empty(&gt[5], 1));
    let log = c.log(&id);
    let kinds: Vec<EventKind> = parse_log(&log).unwrap().events.iter().map(|e| e.kind()).collect();
    assert!(kinds.contains(&EventKind::Corrected));

    assert_eq!(c.op(&id, "resume").json()["state"]["phase"], "tracking");
    for _ in 6..fx.spec.frames {
        assert_eq!(c.op(&id, "step").status, 200);
    }
    let r = c.op(&id, "step");
    assert_eq!((r.status, r.json()["code"].clone()), (409, json!("no_frames_remaining")));
    assert_eq!(c.op(&id, "finish").json()["state"]["phase"], "finished");
    assert_eq!(c.op(&id, "resume").status, 409);

    // The served log is a valid, replayable history.
    let log = c.log(&id);
    let b = synthetic(1.0).build(&fx.spec.sequence_id(0), Some(gt.clone())).unwrap();
    let seq = open_davis_sequence(fx.data.path(), &fx.spec.sequence_id(0)).unwrap();
    let session = replay(&log, seq.frames, b.segmenter, b.propagator).unwrap();
    assert_eq!(session.phase(), SessionPhase::Finished);
    assert_eq!(fs::read_to_string(&m.log_path).unwrap(), log);
}

#[test]
fn overlay_is_rgba_and_out_of_range_is_404() {
    let fx = Fixture::new(short_spec());
    let gt = fx.gt(0);
    let (_svc, c) = fx.start(0.0, false);
    let id = c.create(&fx.video(0)).id.to_string();
    c.clicks(&id, 0, None, &[click_on(&gt[0], 1)]);

    let r = c.get(&format!("/v1/sessions/{id}/frames/0/overlay.png"));
    assert_eq!((r.status, r.header("content-type")), (200, Some("image/png")));
    let img = image::load_from_memory(&r.body).unwrap().to_rgba8();
    assert_eq!(img.dimensions(), (gt[0].width(), gt[0].height()));
    let color = voc_colormap()[1];
    for (x, y, px) in img.enumerate_pixels() {
        let expected = if gt[0].get(x, y) == 1 { [color[0], color[1], color[2], 128] } else { [0, 0, 0, 0] };
        assert_eq!(px.0, expected, "pixel ({x}, {y})");
    }
    let untracked = c.get(&format!("/v1/sessions/{id}/frames/4/overlay.png"));
    assert_eq!(untracked.status, 200);
    assert!(image::load_from_memory(&untracked.body).unwrap().to_rgba8().pixels().all(|p| p.0[3] == 0));

    assert_eq!(c.get(&format!("/v1/sessions/{id}/frames/10/overlay.png")).status, 404);
    assert_eq!(c.get(&format!("/v1/sessions/{id}/frames/99/image.png")).status, 404);
    let frame = c.get(&format!("/v1/sessions/{id}/frames/0/image.png"));
    assert_eq!(image::load_from_memory(&frame.body).unwrap().width(), gt[0].width());
}

#[test]
fn unknown_sessions_and_bad_requests() {
    let fx = Fixture::new(short_spec());
    let (_svc, c) = fx.start(0.0, false);
    let ghost = uuid::Uuid::new_v4();
    assert_eq!(c.get(&format!("/v1/sessions/{ghost}")).status, 404);
    assert_eq!(c.get("/v1/sessions/not-a-uuid").status, 404);
    assert_eq!(c.op(&ghost.to_string(), "start").status, 404);
    assert_eq!(c.get(&format!("/v1/sessions/{ghost}/frames/0/overlay.png")).status, 404);

    let r = c.post("/v1/sessions", &json!({ "video_dir": fx.data.path().join("missing") }));
    assert_eq!(r.status, 400);
    // A plain frame folder has no annotations for the synthetic backend.
    let plain = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fx.video(0)).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, plain.path().join(p.file_name().unwrap())).unwrap();
    }
    let r = c.post("/v1/sessions", &json!({ "video_dir": plain.path() }));
    assert_eq!(r.status, 400, "{}", String::from_utf8_lossy(&r.body));
    assert!(r.json()["error"].as_str().unwrap().contains("annotation"));

    let id = c.create(&fx.video(0)).id.to_string();
    assert_eq!(c.clicks(&id, 0, None, &[]).status, 400);
    assert_eq!(c.clicks(&id, 0, None, &[(5000, 1, "positive")]).status, 400);
    // A click on background segments nothing.
    assert_eq!(c.clicks(&id, 0, None, &[(0, 0, "positive")]).status, 422);
    assert_eq!(c.manifest(&id).state.phase, SessionPhase::Idle);
    let r = c.post(&format!("/v1/sessions/{id}/clicks"), &json!({ "frame": 0 }));
    assert!(r.status == 400 || r.status == 422);

    let list: Vec<SessionManifest> = serde_json::from_slice(&c.get("/v1/sessions").body).unwrap();
    assert_eq!(list.len(), 1);
}

fn connect(url: &str) -> WebSocket<MaybeTlsStream<TcpStream>> {
    let (ws, _) = tungstenite::connect(url).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
    }
    ws
}

fn read_frames(ws: &mut WebSocket<MaybeTlsStream<TcpStream>>, until: usize) -> Vec<StreamMsg> {
    let mut out: Vec<StreamMsg> = Vec::new();
    while out.last().is_none_or(|m| m.frame < until) {
        match ws.read().unwrap() {
            Message::Text(t) => out.push(serde_json::from_str(t.as_str()).unwrap()),
            Message::Ping(_) | Message::Pong(_) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
    out
}

#[test]
fn stream_delivers_frames_in_order_and_resumes_from_a_frame() {
    let fx = Fixture::new(SynthSpec { sequences: 1, frames: 30, ..SynthSpec::default() });
    let gt = fx.gt(0);
    let (svc, c) = fx.start(1.0, true);
    let id = c.create(&fx.video(0)).id.to_string();
    c.clicks(&id, 0, None, &[click_on(&gt[0], 1)]);
    c.clicks(&id, 0, None, &[click_on(&gt[0], 2)]);
    let ws_url = format!("ws://{}/v1/sessions/{id}/stream", svc.addr());
    let mut live = connect(&ws_url);
    assert_eq!(c.op(&id, "start").status, 200);

    let msgs = read_frames(&mut live, 29);
    let frames: Vec<usize> = msgs.iter().map(|m| m.frame).collect();
    assert_eq!(frames, (1..30).collect::<Vec<_>>());
    for (m, g) in msgs.iter().zip(&gt[1..]) {
        use base64::Engine as _;
        let png = base64::engine::general_purpose::STANDARD.decode(&m.mask_png_b64).unwrap();
        let map = read_mask_png(&png).unwrap();
        assert_eq!(map.dims(), g.dims());
        assert!(m.quality.iter().all(|q| (0.0..=1.0).contains(&q.score)));
    }

    let mut late = connect(&format!("{ws_url}?from=20"));
    let tail: Vec<usize> = read_frames(&mut late, 29).iter().map(|m| m.frame).collect();
    assert_eq!(tail, (21..30).collect::<Vec<_>>());
    assert_eq!(c.op(&id, "finish").status, 200);
}

#[test]
fn sessions_survive_a_restart() {
    let fx = Fixture::new(short_spec());
    let gt = fx.gt(0);
    let (id, before, overlay, log) = {
        let (_svc, c) = fx.start(1.0, false);
        let id = c.create(&fx.video(0)).id.to_string();
        c.clicks(&id, 0, None, &[click_on(&gt[0], 1)]);
        c.clicks(&id, 0, None, &[click_on(&gt[0], 2)]);
        c.op(&id, "start");
        for _ in 0..3 {
            c.op(&id, "step");
        }
        c.op(&id, "pause");
        let overlay = c.get(&format!("/v1/sessions/{id}/frames/3/overlay.png")).body;
        let (manifest, log) = (c.manifest(&id), c.log(&id));
        (id, manifest, overlay, log)
    };

    let (svc, c) = fx.start(1.0, false);
    let after = c.manifest(&id);
    assert_eq!(after.state, before.state);
    assert_eq!((after.id, after.created_ms, &after.video_dir), (before.id, before.created_ms, &before.video_dir));
    assert_eq!(c.get(&format!("/v1/sessions/{id}/frames/3/overlay.png")).body, overlay);
    assert_eq!(c.log(&id), log);

    // Restored sessions keep working and keep appending to the same file.
    assert_eq!(c.op(&id, "resume").status, 200);
    let msg: StreamMsg = serde_json::from_slice(&c.op(&id, "step").body).unwrap();
    assert_eq!(msg.frame, 4);
    let mut ws = connect(&format!("ws://{}/v1/sessions/{id}/stream", svc.addr()));
    let frames: Vec<usize> = read_frames(&mut ws, 4).iter().map(|m| m.frame).collect();
    assert_eq!(frames, [1, 2, 3, 4]);
    let log = c.log(&id);
    assert_eq!(fs::read_to_string(&after.log_path).unwrap(), log);
    assert!(parse_log(&log).is_ok());

    // A session whose log no longer replays is skipped, not fatal.
    drop(c);
    drop(svc);
    let mut text = fs::read_to_string(&after.log_path).unwrap();
    text.push_str("{\"garbage\":true}\n");
    fs::write(&after.log_path, text).unwrap();
    let (_svc, c) = fx.start(1.0, false);
    assert_eq!(c.get(&format!("/v1/sessions/{id}")).status, 404);
    assert_eq!(c.get("/v1/health").status, 200);
}

/// Event payloads without timestamps and hash chain.
fn payloads(log: &str) -> Vec<(usize, EventKind, String)> {
    parse_log(log)
        .unwrap()
        .events
        .into_iter()
        .map(|e| (e.frame, e.kind(), serde_json::to_string(&e.body).unwrap()))
        .collect()
}

#[test]
fn concurrent_sessions_step_independently() {
    let fx = Fixture::new(SynthSpec { sequences: 2, frames: 20, ..SynthSpec::default() });
    let (_svc, c) = fx.start(1.0, false);
    let run = |s: usize| {
        let gt = fx.gt(s);
        let id = c.create(&fx.video(s)).id.to_string();
        let clicks = [click_on(&gt[0], 1), click_on(&gt[0], 2)];
        (id, clicks)
    };
    let sessions: Vec<(String, [(u32, u32, &str); 2])> = (0..2).map(run).collect();
    let frames = fx.spec.frames;
    std::thread::scope(|scope| {
        for (id, clicks) in &sessions {
            let c = c.clone();
            scope.spawn(move || {
                for click in clicks {
                    assert_eq!(c.clicks(id, 0, None, &[*click]).status, 200);
                }
                c.op(id, "start");
                for _ in 1..frames {
                    assert_eq!(c.op(id, "step").status, 200);
                }
                c.op(id, "finish");
            });
        }
    });

    // Each log equals a solo run on a fresh service.
    let solo = Fixture { data: tempfile::tempdir().unwrap(), state: tempfile::tempdir().unwrap(), spec: fx.spec.clone() };
    make_synthetic_dataset(&solo.spec, solo.data.path()).unwrap();
    let (_svc2, c2) = solo.start(1.0, false);
    for (s, (id, clicks)) in sessions.iter().enumerate() {
        let sid = c2.create(&solo.video(s)).id.to_string();
        for click in clicks {
            c2.clicks(&sid, 0, None, &[*click]);
        }
        c2.op(&sid, "start");
        for _ in 1..frames {
            c2.op(&sid, "step");
        }
        c2.op(&sid, "finish");
        assert_eq!(payloads(&c.log(id)), payloads(&c2.log(&sid)), "session {s}");
    }
}

#[test]
fn interleaved_requests_serialize_into_a_replayable_log() {
    let fx = Fixture::new(SynthSpec { sequences: 1, frames: 40, ..SynthSpec::default() });
    let gt = fx.gt(0);
    let (_svc, c) = fx.start(1.0, false);
    let id = c.create(&fx.video(0)).id.to_string();
    c.clicks(&id, 0, None, &[click_on(&gt[0], 1)]);
    c.clicks(&id, 0, None, &[click_on(&gt[0], 2)]);
    c.op(&id, "start");
    let gt = Arc::new(gt);
    std::thread::scope(|scope| {
        for worker in 0..4 {
            let (c, id, gt) = (c.clone(), id.clone(), gt.clone());
            scope.spawn(move || {
                for i in 0..25 {
                    match (worker + i) % 5 {
                        0 | 1 => drop(c.op(&id, "step")),
                        2 => drop(c.op(&id, "pause")),
                        3 => drop(c.op(&id, "resume")),
                        _ => {
                            let frame = c.manifest(&id).state.current_frame;
                            drop(c.clicks(&id, frame, Some(1), &[click_on(&gt[frame], 1)]));
                        }
                    }
                }
            });
        }
    });
    let log = c.log(&id);
    let events = parse_log(&log).unwrap().events;
    let propagated: Vec<usize> =
        events.iter().filter(|e| e.kind() == EventKind::Propagated).map(|e| e.frame).collect();
    assert_eq!(propagated, (1..=propagated.len()).collect::<Vec<_>>());
    assert!(events.iter().any(|e| matches!(e.body, EventBody::Paused { .. })));

    let seq = open_davis_sequence(fx.data.path(), &fx.spec.sequence_id(0)).unwrap();
    let b = synthetic(1.0).build(&seq.sequence_id, seq.groundtruth()).unwrap();
    let replayed = replay(&log, seq.frames, b.segmenter, b.propagator).unwrap();
    assert_eq!(replayed.state(), c.manifest(&id).state);
}

#[test]
fn remote_backend_sessions_need_no_annotations() {
    let fx = Fixture::new(short_spec());
    let gt = fx.gt(0);
    let id0 = fx.spec.sequence_id(0);
    let server = MockServer::start(SyntheticScene::new().with_sequence(&id0, gt.clone()), DegradationConfig::default())
        .unwrap();
    let remote = BackendConfig::Remote { url: server.url(), strict: true, timeout_ms: 10_000, retries: 0 };
    let svc = RunningService::start(fx.config(remote.clone(), false)).unwrap();
    let c = Client::new(svc.url());

    let plain = tempfile::tempdir().unwrap();
    let dir = plain.path().join(&id0);
    fs::create_dir(&dir).unwrap();
    for entry in fs::read_dir(fx.video(0)).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, dir.join(p.file_name().unwrap())).unwrap();
    }
    let m = c.create(&dir);
    assert_eq!(m.backend, remote);
    let id = m.id.to_string();
    assert_eq!(c.clicks(&id, 0, None, &[click_on(&gt[0], 1)]).status, 200);
    c.op(&id, "start");
    let msg: StreamMsg = serde_json::from_slice(&c.op(&id, "step").body).unwrap();
    assert_eq!(msg.frame, 1);

    // Backend outage: 502 and the session pauses.
    drop(server);
    let r = c.op(&id, "step");
    assert_eq!((r.status, r.json()["phase"].clone()), (502, json!("paused")));
    assert_eq!(c.manifest(&id).state.current_frame, 1);

    // Startup refuses an unreachable backend.
    drop(c);
    drop(svc);
    assert!(RunningService::start(fx.config(remote, false)).is_err());
}
