//! Append-only session log persisted as JSON Lines.
//!
//! The first line is a header carrying the engine version, the frozen
//! configuration, the video shape and a backend description. Every later
//! line is one [`SessionEvent`] whose `chain` field is
//! `sha256(previous_chain || line_without_chain)` in hex; the header's own
//! hash seeds the chain. Altering any byte of the file breaks the chain at
//! or before the altered line.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{EngineConfig, QualityReport};
use crate::mask::{FrameRef, ObjectId, PointPrompt};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Source of event timestamps, in milliseconds.
pub trait Clock: Send {
    fn now_ms(&mut self) -> u64;
}

/// Wall-clock time since the Unix epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&mut self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    }
}

/// Counts up by one per call, so logs are reproducible byte for byte.
#[derive(Clone, Copy, Debug, Default)]
pub struct LogicalClock {
    next: u64,
}

impl LogicalClock {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }
}

impl Clock for LogicalClock {
    fn now_ms(&mut self) -> u64 {
        let t = self.next;
        self.next += 1;
        t
    }
}

/// Replays recorded timestamps, then defers to a fallback clock.
pub struct ScriptedClock {
    script: VecDeque<u64>,
    fallback: Box<dyn Clock>,
}

impl ScriptedClock {
    pub fn new(script: impl IntoIterator<Item = u64>, fallback: Box<dyn Clock>) -> Self {
        Self { script: script.into_iter().collect(), fallback }
    }
}

impl Clock for ScriptedClock {
    fn now_ms(&mut self) -> u64 {
        self.script.pop_front().unwrap_or_else(|| self.fallback.now_ms())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Init,
    Clicked,
    Propagated,
    Assessed,
    Refined,
    ReAnchored,
    Corrected,
    Paused,
    Resumed,
    Finished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickPurpose {
    Init,
    Correct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorCause {
    Refined,
    Corrected,
    /// Propagator restored on the committed map when resuming after a
    /// backend failure.
    Resync,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectArea {
    pub object_id: ObjectId,
    pub area: usize,
}

/// Kind-specific payload. Mask digests are sha256 hex of the raw raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    Clicked {
        object_id: ObjectId,
        purpose: ClickPurpose,
        points: Vec<PointPrompt>,
    },
    Init {
        object_id: ObjectId,
        area: usize,
        digest: String,
    },
    Propagated {
        digest: String,
        areas: Vec<ObjectArea>,
    },
    Assessed {
        reports: Vec<QualityReport>,
    },
    Refined {
        object_id: ObjectId,
        accepted: bool,
        failing_score: f64,
        confidence: Option<f64>,
        points: Vec<PointPrompt>,
        area: usize,
        error: Option<String>,
    },
    ReAnchored {
        cause: AnchorCause,
        digest: String,
    },
    Corrected {
        object_id: ObjectId,
        area: usize,
        digest: String,
    },
    Paused {
        error: Option<String>,
    },
    Resumed {},
    Finished {
        frames: usize,
    },
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::Clicked { .. } => EventKind::Clicked,
            EventBody::Init { .. } => EventKind::Init,
            EventBody::Propagated { .. } => EventKind::Propagated,
            EventBody::Assessed { .. } => EventKind::Assessed,
            EventBody::Refined { .. } => EventKind::Refined,
            EventBody::ReAnchored { .. } => EventKind::ReAnchored,
            EventBody::Corrected { .. } => EventKind::Corrected,
            EventBody::Paused { .. } => EventKind::Paused,
            EventBody::Resumed {} => EventKind::Resumed,
            EventBody::Finished { .. } => EventKind::Finished,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub index: u64,
    pub timestamp_ms: u64,
    pub frame: usize,
    #[serde(flatten)]
    pub body: EventBody,
}

impl SessionEvent {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub sequence_id: String,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
}

impl VideoInfo {
    pub fn of(video: &[FrameRef]) -> Self {
        let first = &video[0];
        Self { sequence_id: first.sequence_id.clone(), frames: video.len(), width: first.width, height: first.height }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub engine_version: String,
    pub config: EngineConfig,
    pub video: VideoInfo,
    pub backend: String,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log is empty")]
    Empty,
    #[error("header: {0}")]
    Header(serde_json::Error),
    #[error("line {line}: {source}")]
    Event { line: usize, source: serde_json::Error },
    #[error("line {line}: missing chain field")]
    MissingChain { line: usize },
    #[error("chain broken at event {index} ({kind:?})")]
    ChainBroken { index: u64, kind: EventKind },
    #[error("event index {got} where {expected} was expected")]
    IndexGap { expected: u64, got: u64 },
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// `{...}` plus the chain field, keeping the body bytes untouched.
fn seal(body: &str, chain: &str) -> String {
    debug_assert!(body.ends_with('}'));
    format!("{},\"chain\":\"{chain}\"}}", &body[..body.len() - 1])
}

/// Splits a sealed line into the unsealed body and the chain value.
fn unseal(line: &str) -> Option<(String, &str)> {
    let start = line.rfind(",\"chain\":\"")?;
    let chain = line[start + 10..].strip_suffix("\"}")?;
    Some((format!("{}}}", &line[..start]), chain))
}

/// Shared read handle. Readers always see a complete prefix of the log.
#[derive(Clone, Debug)]
pub struct LogReader {
    lines: Arc<RwLock<Vec<String>>>,
}

impl LogReader {
    /// Header line followed by every event line appended so far.
    pub fn snapshot(&self) -> Vec<String> {
        self.lines.read().expect("log lock").clone()
    }

    pub fn len(&self) -> usize {
        self.lines.read().expect("log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct EventLog {
    header: LogHeader,
    lines: Arc<RwLock<Vec<String>>>,
    events: Vec<SessionEvent>,
    head: String,
    clock: Box<dyn Clock>,
    sink: Option<Box<dyn Write + Send>>,
    sink_error: Option<String>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("events", &self.events.len()).field("head", &self.head).finish()
    }
}

impl EventLog {
    pub fn new(header: LogHeader, clock: Box<dyn Clock>, sink: Option<Box<dyn Write + Send>>) -> Self {
        let header_line = serde_json::to_string(&header).expect("header serializes");
        let head = sha_hex(&[header_line.as_bytes()]);
        let mut log = Self {
            header,
            lines: Arc::new(RwLock::new(vec![header_line.clone()])),
            events: Vec::new(),
            head,
            clock,
            sink,
            sink_error: None,
        };
        log.write_through(&header_line);
        log
    }

    fn write_through(&mut self, line: &str) {
        if let Some(sink) = self.sink.as_mut() {
            if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
                tracing::error!(error = %e, "event log sink failed");
                self.sink_error.get_or_insert(e.to_string());
            }
        }
    }

    /// Directs future lines to `sink`; earlier lines are not rewritten.
    pub fn attach_sink(&mut self, sink: Box<dyn Write + Send>) {
        self.sink = Some(sink);
    }

    /// First persistence failure, if any.
    pub fn sink_error(&self) -> Option<&str> {
        self.sink_error.as_deref()
    }

    pub fn append(&mut self, frame: usize, body: EventBody) -> &SessionEvent {
        let event = SessionEvent { index: self.events.len() as u64, timestamp_ms: self.clock.now_ms(), frame, body };
        let unsealed = serde_json::to_string(&event).expect("event serializes");
        self.head = sha_hex(&[self.head.as_bytes(), unsealed.as_bytes()]);
        let line = seal(&unsealed, &self.head);
        self.lines.write().expect("log lock").push(line.clone());
        self.write_through(&line);
        self.events.push(event);
        self.events.last().expect("just pushed")
    }

    pub fn header(&self) -> &LogHeader {
        &self.header
    }

    pub fn header_line(&self) -> String {
        self.lines.read().expect("log lock")[0].clone()
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Hex chain value of the newest line.
    pub fn head(&self) -> &str {
        &self.head
    }

    pub fn reader(&self) -> LogReader {
        LogReader { lines: Arc::clone(&self.lines) }
    }

    /// Event line `i` exactly as persisted.
    pub fn line(&self, i: usize) -> Option<String> {
        self.lines.read().expect("log lock").get(i + 1).cloned()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = self.lines.read().expect("log lock").join("\n");
        out.push('\n');
        out
    }
}

/// A log file checked end to end.
#[derive(Clone, Debug)]
pub struct ParsedLog {
    pub header: LogHeader,
    pub header_line: String,
    pub lines: Vec<String>,
    pub events: Vec<SessionEvent>,
}

/// Parses a JSONL log and verifies indices and the hash chain.
pub fn parse_log(text: &str) -> Result<ParsedLog, LogError> {
    let mut raw = text.lines().filter(|l| !l.is_empty());
    let header_line = raw.next().ok_or(LogError::Empty)?.to_string();
    let header: LogHeader = serde_json::from_str(&header_line).map_err(LogError::Header)?;
    let mut head = sha_hex(&[header_line.as_bytes()]);
    let mut lines = Vec::new();
    let mut events = Vec::new();
    for (i, line) in raw.enumerate() {
        let (unsealed, chain) = unseal(line).ok_or(LogError::MissingChain { line: i + 2 })?;
        let event: SessionEvent =
            serde_json::from_str(&unsealed).map_err(|source| LogError::Event { line: i + 2, source })?;
        if event.index != i as u64 {
            return Err(LogError::IndexGap { expected: i as u64, got: event.index });
        }
        head = sha_hex(&[head.as_bytes(), unsealed.as_bytes()]);
        if head != chain {
            return Err(LogError::ChainBroken { index: event.index, kind: event.kind() });
        }
        lines.push(line.to_string());
        events.push(event);
    }
    Ok(ParsedLog { header, header_line, lines, events })
}
