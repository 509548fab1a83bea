//! Re-executes a logged session against fresh backends and checks that
//! every regenerated log line matches the recorded one byte for byte.

use std::sync::Arc;

use thiserror::Error;

use super::events::{parse_log, ClickPurpose, Clock, EventBody, EventKind, LogError, LogicalClock, ScriptedClock, VideoInfo};
use super::{EngineError, Session, SessionOptions, SessionPhase, ENGINE_VERSION};
use crate::backend::{Propagator, Segmenter};
use crate::mask::FrameRef;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("log written by engine {logged}, this is {current}")]
    VersionMismatch { logged: String, current: String },
    #[error("log describes video {logged:?}, given {given:?}")]
    VideoMismatch { logged: VideoInfo, given: VideoInfo },
    #[error("header differs from the one this engine writes")]
    HeaderMismatch,
    #[error("replay diverged at event {index} ({kind:?}): {detail}")]
    Divergence { index: usize, kind: Option<EventKind>, detail: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Replays `log_text` and returns the rebuilt session, whose log equals the
/// input. Later events get logical timestamps following the last one.
pub fn replay(
    log_text: &str,
    video: Vec<FrameRef>,
    segmenter: Arc<dyn Segmenter>,
    propagator: Box<dyn Propagator>,
) -> Result<Session, ReplayError> {
    let parsed = parse_log(log_text)?;
    let next = parsed.events.last().map_or(0, |e| e.timestamp_ms + 1);
    replay_parsed(parsed, video, segmenter, propagator, Box::new(LogicalClock::starting_at(next)))
}

/// Like [`replay`], with `clock` stamping events appended afterwards.
pub fn replay_with_clock(
    log_text: &str,
    video: Vec<FrameRef>,
    segmenter: Arc<dyn Segmenter>,
    propagator: Box<dyn Propagator>,
    clock: Box<dyn Clock>,
) -> Result<Session, ReplayError> {
    replay_parsed(parse_log(log_text)?, video, segmenter, propagator, clock)
}

fn replay_parsed(
    parsed: super::ParsedLog,
    video: Vec<FrameRef>,
    segmenter: Arc<dyn Segmenter>,
    propagator: Box<dyn Propagator>,
    clock: Box<dyn Clock>,
) -> Result<Session, ReplayError> {
    let header = &parsed.header;
    if header.engine_version != ENGINE_VERSION {
        return Err(ReplayError::VersionMismatch { logged: header.engine_version.clone(), current: ENGINE_VERSION.into() });
    }
    if video.is_empty() || header.video != VideoInfo::of(&video) {
        let given = if video.is_empty() {
            VideoInfo { sequence_id: String::new(), frames: 0, width: 0, height: 0 }
        } else {
            VideoInfo::of(&video)
        };
        return Err(ReplayError::VideoMismatch { logged: header.video.clone(), given });
    }
    let clock = ScriptedClock::new(parsed.events.iter().map(|e| e.timestamp_ms), clock);
    let options = SessionOptions { clock: Box::new(clock), sink: None, backend: header.backend.clone() };
    let mut session = Session::new(video, segmenter, propagator, header.config.clone(), options)?;
    if session.log().header_line() != parsed.header_line {
        return Err(ReplayError::HeaderMismatch);
    }

    let mut i = 0;
    while i < parsed.events.len() {
        let event = &parsed.events[i];
        let diverged = |detail: String| ReplayError::Divergence { index: i, kind: Some(event.kind()), detail };
        let result = match &event.body {
            EventBody::Clicked { object_id, purpose: ClickPurpose::Init, points } => {
                session.add_clicks(Some(*object_id), points.clone()).map(drop)
            }
            EventBody::Clicked { object_id, purpose: ClickPurpose::Correct, points } => {
                session.correct(*object_id, points.clone()).map(drop)
            }
            EventBody::Propagated { .. } => start_if_needed(&mut session).and_then(|_| session.track_step().map(drop)),
            EventBody::Paused { error: None } => start_if_needed(&mut session).and_then(|_| session.pause()),
            EventBody::Paused { error: Some(message) } => start_if_needed(&mut session).map(|_| {
                session.record_failure(event.frame, message.clone());
            }),
            EventBody::Resumed {} => session.resume(),
            EventBody::Finished { .. } => start_if_needed(&mut session).and_then(|_| session.finish()),
            other => return Err(diverged(format!("{:?} event without a preceding action", other.kind()))),
        };
        let produced = session.log().len();
        if let Err(e) = result {
            if produced == i {
                return Err(diverged(format!("action failed: {e}")));
            }
        }
        if produced == i {
            return Err(diverged("action produced no events".into()));
        }
        for j in i..produced {
            let regenerated = session.log().line(j).expect("appended");
            match parsed.lines.get(j) {
                Some(logged) if *logged == regenerated => {}
                logged => {
                    return Err(ReplayError::Divergence {
                        index: j,
                        kind: logged.and(parsed.events.get(j)).map(|e| e.kind()),
                        detail: format!("regenerated {regenerated}"),
                    })
                }
            }
        }
        i = produced;
    }
    Ok(session)
}

fn start_if_needed(session: &mut Session) -> Result<(), EngineError> {
    if session.phase() == SessionPhase::Initialized {
        session.start()?;
    }
    Ok(())
}
