//! Session state machine: click initialization, propagation, quality-gated
//! refinement with re-anchoring, pause and correction, and the event log
//! that makes every run auditable and replayable.

mod events;
mod replay;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use events::{
    parse_log, AnchorCause, ClickPurpose, Clock, EventBody, EventKind, EventLog, LogError, LogHeader, LogReader,
    LogicalClock, ObjectArea, ParsedLog, ScriptedClock, SessionEvent, SystemClock, VideoInfo, ENGINE_VERSION,
};
pub use replay::{replay, replay_with_clock, ReplayError};

use crate::backend::{BackendError, PropagateResult, Propagator, SegmentRequest, Segmenter};
use crate::mask::{
    compose_labelmap, extract_or_empty, BinaryMask, FrameRef, LabelMap, MaskError, ObjectId, OverlapPolicy,
    PointPrompt,
};
use crate::prompts::{encode_mask_prompt, project_prompts, PromptConfig, PromptError};
use crate::Affinity;

/// Quality gate: `score = alpha * confidence + (1 - alpha) * min(area_ratio, 1)`,
/// passing when `score >= tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self { alpha: 0.5, tau: 0.85 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub quality: QualityConfig,
    /// Run refinement on failing objects.
    pub refine: bool,
    pub prompts: PromptConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { quality: QualityConfig::default(), refine: true, prompts: PromptConfig::default() }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let q = &self.quality;
        if !(0.0..=1.0).contains(&q.alpha) || !(0.0..=1.0).contains(&q.tau) {
            return Err(EngineError::Config(format!("alpha and tau must lie in [0, 1], got {} and {}", q.alpha, q.tau)));
        }
        if self.prompts.prompt_res == 0 {
            return Err(EngineError::Config("prompt_res must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub object_id: ObjectId,
    pub confidence: f64,
    pub area_ratio: f64,
    pub score: f64,
    pub pass: bool,
}

impl QualityReport {
    /// `area_ratio` is 1 when the anchor area is 0.
    pub fn assess(object_id: ObjectId, confidence: f64, area: usize, anchor_area: usize, config: &QualityConfig) -> Self {
        let confidence = confidence.clamp(0.0, 1.0);
        let area_ratio = if anchor_area == 0 { 1.0 } else { area as f64 / anchor_area as f64 };
        let score = (config.alpha * confidence + (1.0 - config.alpha) * area_ratio.min(1.0)).clamp(0.0, 1.0);
        Self { object_id, confidence, area_ratio, score, pass: score >= config.tau }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Idle,
    Initialized,
    Tracking,
    Paused,
    Finished,
}

impl std::fmt::Display for SessionPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SessionPhase::Idle => "idle",
            SessionPhase::Initialized => "initialized",
            SessionPhase::Tracking => "tracking",
            SessionPhase::Paused => "paused",
            SessionPhase::Finished => "finished",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("video has no frames")]
    EmptyVideo,
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("{op} is not allowed in phase {phase}")]
    WrongPhase { op: &'static str, phase: SessionPhase },
    #[error("no clicks given")]
    NoClicks,
    #[error("segmenter returned an empty mask; add positive clicks")]
    EmptyMask,
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("object ids exhausted")]
    ObjectLimit,
    #[error("clicks target frame {got}, the session accepts frame {expected}")]
    FrameMismatch { expected: usize, got: usize },
    #[error("all frames have been propagated")]
    NoFramesRemaining,
    #[error("object {0} passed its quality check")]
    NotFailing(ObjectId),
    #[error("backend failed at frame {frame}: {source}")]
    Backend { frame: usize, source: BackendError },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub label: String,
    pub clicks: Vec<PointPrompt>,
    pub last_anchor: usize,
    pub anchor_area: usize,
}

/// Serializable view of a session's state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub phase: SessionPhase,
    pub current_frame: usize,
    pub frames: usize,
    pub objects: BTreeMap<ObjectId, ObjectEntry>,
    pub last_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub frame: usize,
    pub label_map: LabelMap,
    pub reports: Vec<QualityReport>,
    /// Objects whose refined mask was accepted on this frame.
    pub refined: Vec<ObjectId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub object_id: ObjectId,
    pub accepted: bool,
    /// The refined mask when accepted, otherwise the propagated one.
    pub mask: BinaryMask,
    pub confidence: f64,
}

pub struct SessionOptions {
    pub clock: Box<dyn Clock>,
    pub sink: Option<Box<dyn Write + Send>>,
    /// Free-form backend description recorded in the log header.
    pub backend: String,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self { clock: Box::new(LogicalClock::default()), sink: None, backend: "unspecified".into() }
    }
}

/// One interactive tracking session over one video. Mutating operations
/// must be serialized by the caller.
pub struct Session {
    video: Vec<FrameRef>,
    segmenter: Arc<dyn Segmenter>,
    propagator: Box<dyn Propagator>,
    config: EngineConfig,
    phase: SessionPhase,
    current_frame: usize,
    objects: BTreeMap<ObjectId, ObjectEntry>,
    masks: Vec<Option<LabelMap>>,
    log: EventLog,
    last_error: Option<String>,
    /// Set after a backend failure, whose propagator state is unknown.
    resync: bool,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("phase", &self.phase)
            .field("current_frame", &self.current_frame)
            .field("objects", &self.objects.keys().collect::<Vec<_>>())
            .field("events", &self.log.len())
            .finish()
    }
}

impl Session {
    pub fn new(
        video: Vec<FrameRef>,
        segmenter: Arc<dyn Segmenter>,
        propagator: Box<dyn Propagator>,
        config: EngineConfig,
        options: SessionOptions,
    ) -> Result<Self, EngineError> {
        if video.is_empty() {
            return Err(EngineError::EmptyVideo);
        }
        config.validate()?;
        let header = LogHeader {
            engine_version: ENGINE_VERSION.to_string(),
            config: config.clone(),
            video: VideoInfo::of(&video),
            backend: options.backend,
        };
        let log = EventLog::new(header, options.clock, options.sink);
        let masks = vec![None; video.len()];
        Ok(Self {
            video,
            segmenter,
            propagator,
            config,
            phase: SessionPhase::Idle,
            current_frame: 0,
            objects: BTreeMap::new(),
            masks,
            log,
            last_error: None,
            resync: false,
        })
    }

    pub fn phase(&self) -> SessionPhase {
        self.phase
    }

    pub fn current_frame(&self) -> usize {
        self.current_frame
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn video(&self) -> &[FrameRef] {
        &self.video
    }

    pub fn objects(&self) -> &BTreeMap<ObjectId, ObjectEntry> {
        &self.objects
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn last_error(&self) -> Option<&str> {
        self.last_error.as_deref()
    }

    /// Stored map for frame `i`, once emitted.
    pub fn mask(&self, i: usize) -> Option<&LabelMap> {
        self.masks.get(i).and_then(Option::as_ref)
    }

    pub fn masks(&self) -> &[Option<LabelMap>] {
        &self.masks
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            phase: self.phase,
            current_frame: self.current_frame,
            frames: self.video.len(),
            objects: self.objects.clone(),
            last_error: self.last_error.clone(),
        }
    }

    /// Frame that clicks must target in the current phase.
    pub fn click_frame(&self) -> usize {
        if self.phase == SessionPhase::Paused {
            self.current_frame
        } else {
            0
        }
    }

    pub fn check_click_frame(&self, frame: usize) -> Result<(), EngineError> {
        let expected = self.click_frame();
        if frame != expected {
            return Err(EngineError::FrameMismatch { expected, got: frame });
        }
        Ok(())
    }

    fn require(&self, op: &'static str, allowed: &[SessionPhase]) -> Result<(), EngineError> {
        if allowed.contains(&self.phase) {
            Ok(())
        } else {
            Err(EngineError::WrongPhase { op, phase: self.phase })
        }
    }

    fn working_map(&self, frame: usize) -> LabelMap {
        let f = &self.video[frame];
        self.masks[frame].clone().unwrap_or_else(|| LabelMap::background(f.width, f.height))
    }

    /// Makes `map` the quality reference of the objects in `ids`, whose
    /// masks were just replaced by trusted ones. The others keep comparing
    /// against their own last trusted mask.
    fn reset_anchors(&mut self, frame: usize, map: &LabelMap, ids: &[ObjectId]) {
        for &id in ids {
            if let Some(entry) = self.objects.get_mut(&id) {
                entry.last_anchor = frame;
                entry.anchor_area = map.area_of(id);
            }
        }
    }

    fn fresh_id(&self) -> Result<ObjectId, EngineError> {
        match self.objects.keys().next_back() {
            None => Ok(1),
            Some(&255) => Err(EngineError::ObjectLimit),
            Some(&max) => Ok(max + 1),
        }
    }

    /// Adds a new object from clicks on the click frame and returns the
    /// composed map.
    pub fn init_object(&mut self, clicks: Vec<PointPrompt>) -> Result<LabelMap, EngineError> {
        self.add_clicks(None, clicks).map(|(_, map)| map)
    }

    /// Segments `clicks` as object `object_id` (a fresh id when `None`) on
    /// the click frame. An existing object's mask is replaced. Allowed while
    /// idle, initialized or paused; mid-video the propagator is re-anchored.
    pub fn add_clicks(
        &mut self,
        object_id: Option<ObjectId>,
        clicks: Vec<PointPrompt>,
    ) -> Result<(ObjectId, LabelMap), EngineError> {
        self.require("init_object", &[SessionPhase::Idle, SessionPhase::Initialized, SessionPhase::Paused])?;
        let frame = self.click_frame();
        self.check_points(frame, &clicks)?;
        let id = match object_id {
            Some(0) => return Err(MaskError::ZeroObjectId.into()),
            Some(id) => id,
            None => self.fresh_id()?,
        };
        let clicks: Vec<PointPrompt> = clicks.into_iter().map(|p| PointPrompt { object_id: id, ..p }).collect();
        let result = self
            .segmenter
            .segment(&SegmentRequest::points(&self.video[frame], &clicks))
            .map_err(|source| EngineError::Backend { frame, source })?;
        if result.mask.is_empty() {
            return Err(EngineError::EmptyMask);
        }
        let map = self.working_map(frame).replace_object(id, &result.mask)?;
        let mid_video = self.phase == SessionPhase::Paused;
        let anchored = if mid_video {
            self.propagator.re_anchor(&self.video[frame], &map)
        } else {
            self.propagator.init(&self.video[frame], &map)
        };
        anchored.map_err(|source| EngineError::Backend { frame, source })?;
        self.resync = false;

        self.log.append(frame, EventBody::Clicked { object_id: id, purpose: ClickPurpose::Init, points: clicks.clone() });
        self.log.append(frame, EventBody::Init { object_id: id, area: map.area_of(id), digest: map.digest() });
        self.objects
            .entry(id)
            .or_insert_with(|| ObjectEntry { label: format!("object {id}"), clicks: Vec::new(), last_anchor: frame, anchor_area: 0 })
            .clicks
            .extend(clicks);
        self.reset_anchors(frame, &map, &[id]);
        self.masks[frame] = Some(map.clone());
        if self.phase == SessionPhase::Idle {
            self.phase = SessionPhase::Initialized;
        }
        Ok((id, map))
    }

    fn check_points(&self, frame: usize, clicks: &[PointPrompt]) -> Result<(), EngineError> {
        if clicks.is_empty() {
            return Err(EngineError::NoClicks);
        }
        let (width, height) = (self.video[frame].width, self.video[frame].height);
        match clicks.iter().find(|p| p.x >= width || p.y >= height) {
            Some(p) => Err(MaskError::PointOutOfFrame { x: p.x, y: p.y, width, height }.into()),
            None => Ok(()),
        }
    }

    pub fn start(&mut self) -> Result<(), EngineError> {
        self.require("start", &[SessionPhase::Initialized])?;
        self.phase = SessionPhase::Tracking;
        Ok(())
    }

    pub fn frames_remaining(&self) -> usize {
        self.video.len() - 1 - self.current_frame
    }

    /// Routes a backend failure at `frame`: the session pauses and the log
    /// records the error.
    fn fail(&mut self, frame: usize, source: BackendError) -> EngineError {
        self.record_failure(frame, source.to_string());
        EngineError::Backend { frame, source }
    }

    pub(crate) fn record_failure(&mut self, frame: usize, message: String) {
        tracing::warn!(frame, error = %message, "backend failure; session paused");
        self.phase = SessionPhase::Paused;
        self.resync = true;
        self.log.append(frame, EventBody::Paused { error: Some(message.clone()) });
        self.last_error = Some(message);
    }

    /// Propagates to the next frame, assesses every object and refines the
    /// failing ones.
    pub fn track_step(&mut self) -> Result<StepOutcome, EngineError> {
        self.require("track_step", &[SessionPhase::Tracking])?;
        if self.frames_remaining() == 0 {
            return Err(EngineError::NoFramesRemaining);
        }
        let t = self.current_frame + 1;
        let result = match self.propagator.step(&self.video[t]) {
            Ok(r) => r,
            Err(e) => return Err(self.fail(t, e)),
        };
        if let Err(e) = self.check_propagated(t, &result) {
            return Err(self.fail(t, e));
        }
        let PropagateResult { label_map: propagated, affinities } = result;

        let areas = self.objects.keys().map(|&id| ObjectArea { object_id: id, area: propagated.area_of(id) }).collect();
        self.log.append(t, EventBody::Propagated { digest: propagated.digest(), areas });
        self.current_frame = t;
        self.masks[t] = Some(propagated.clone());
        self.last_error = None;

        let masks: BTreeMap<ObjectId, BinaryMask> =
            self.objects.keys().map(|&id| (id, extract_or_empty(&propagated, id))).collect();
        let by_id: BTreeMap<ObjectId, &Affinity> = affinities.iter().map(|a| (a.object_id(), a)).collect();
        let reports: Vec<QualityReport> = self
            .objects
            .iter()
            .map(|(&id, entry)| {
                let conf = by_id.get(&id).map_or(0.0, |a| a.mean_over(&masks[&id]) as f64);
                QualityReport::assess(id, conf, masks[&id].area(), entry.anchor_area, &self.config.quality)
            })
            .collect();
        self.log.append(t, EventBody::Assessed { reports: reports.clone() });

        let mut refined = Vec::new();
        let mut final_map = propagated.clone();
        if self.config.refine && reports.iter().any(|r| !r.pass) {
            let mut confidences: BTreeMap<ObjectId, f64> = reports.iter().map(|r| (r.object_id, r.confidence)).collect();
            let mut object_masks = masks.clone();
            for report in reports.iter().filter(|r| !r.pass) {
                let affinity = by_id.get(&report.object_id).copied().cloned().unwrap_or_else(|| {
                    let (w, h) = propagated.dims();
                    Affinity::uniform(report.object_id, w, h, 0.0)
                });
                let outcome = self.refine(report, &masks[&report.object_id], &affinity)?;
                if outcome.accepted {
                    confidences.insert(outcome.object_id, outcome.confidence);
                    object_masks.insert(outcome.object_id, outcome.mask);
                    refined.push(outcome.object_id);
                }
            }
            if !refined.is_empty() {
                let parts: Vec<(ObjectId, BinaryMask)> = object_masks.into_iter().collect();
                final_map = compose_labelmap(&parts, &OverlapPolicy::Confidence(confidences))?;
                self.masks[t] = Some(final_map.clone());
                if let Err(e) = self.propagator.re_anchor(&self.video[t], &final_map) {
                    return Err(self.fail(t, e));
                }
                self.log.append(t, EventBody::ReAnchored { cause: AnchorCause::Refined, digest: final_map.digest() });
                self.reset_anchors(t, &final_map, &refined);
            }
        }
        Ok(StepOutcome { frame: t, label_map: final_map, reports, refined })
    }

    fn check_propagated(&self, t: usize, result: &PropagateResult) -> Result<(), BackendError> {
        result.validate()?;
        let f = &self.video[t];
        if result.label_map.dims() != (f.width, f.height) {
            return Err(BackendError::Schema(format!(
                "propagated map is {:?}, frame is {}x{}",
                result.label_map.dims(),
                f.width,
                f.height
            )));
        }
        if let Some(id) = result.label_map.object_ids().iter().find(|id| !self.objects.contains_key(id)) {
            return Err(BackendError::Schema(format!("propagator reported untracked object {id}")));
        }
        Ok(())
    }

    /// Projects `affinity` into point prompts, adds `mask` as a mask prompt
    /// and asks the segmenter for a better mask. The result is accepted when
    /// it is nonempty and its confidence reaches the failing score. Segmenter
    /// errors keep the original mask.
    pub fn refine(
        &mut self,
        report: &QualityReport,
        mask: &BinaryMask,
        affinity: &Affinity,
    ) -> Result<RefineOutcome, EngineError> {
        self.require("refine", &[SessionPhase::Tracking])?;
        if report.pass {
            return Err(EngineError::NotFailing(report.object_id));
        }
        let id = report.object_id;
        let t = self.current_frame;
        let p = &self.config.prompts;
        let points = project_prompts(affinity, mask, p.k_pos, p.k_neg, p.min_dist)?;
        let mask_prompt = encode_mask_prompt(mask, p.prompt_res, p.logit_mag)?;
        let request = SegmentRequest { frame: &self.video[t], points: &points, bbox: None, mask_prompt: Some(&mask_prompt) };
        let (outcome, error) = match self.segmenter.segment(&request) {
            Ok(r) => {
                let accepted = !r.mask.is_empty() && r.confidence >= report.score;
                let kept = if accepted { r.mask } else { mask.clone() };
                (RefineOutcome { object_id: id, accepted, mask: kept, confidence: r.confidence }, None)
            }
            Err(e) => {
                tracing::warn!(frame = t, object = id, error = %e, "refinement failed; keeping propagated mask");
                let kept = RefineOutcome { object_id: id, accepted: false, mask: mask.clone(), confidence: report.confidence };
                (kept, Some(e.to_string()))
            }
        };
        self.log.append(
            t,
            EventBody::Refined {
                object_id: id,
                accepted: outcome.accepted,
                failing_score: report.score,
                confidence: error.is_none().then_some(outcome.confidence),
                points,
                area: outcome.mask.area(),
                error,
            },
        );
        Ok(outcome)
    }

    pub fn pause(&mut self) -> Result<(), EngineError> {
        self.require("pause", &[SessionPhase::Tracking])?;
        self.phase = SessionPhase::Paused;
        self.log.append(self.current_frame, EventBody::Paused { error: None });
        Ok(())
    }

    /// After a backend failure the propagator is first re-initialized on
    /// the last committed map, since it may already have consumed the failed
    /// frame. If that fails too the session stays paused.
    pub fn resume(&mut self) -> Result<(), EngineError> {
        self.require("resume", &[SessionPhase::Paused])?;
        let t = self.current_frame;
        let map = self.resync.then(|| self.working_map(t));
        if let Some(map) = &map {
            if let Err(e) = self.propagator.init(&self.video[t], map) {
                return Err(self.fail(t, e));
            }
            self.resync = false;
        }
        self.phase = SessionPhase::Tracking;
        self.log.append(t, EventBody::Resumed {});
        if let Some(map) = map {
            self.log.append(t, EventBody::ReAnchored { cause: AnchorCause::Resync, digest: map.digest() });
        }
        Ok(())
    }

    /// Corrects one object on the current frame with user clicks plus the
    /// object's current mask as a mask prompt, then re-anchors. The
    /// corrected object wins any overlap.
    pub fn correct(&mut self, object_id: ObjectId, clicks: Vec<PointPrompt>) -> Result<LabelMap, EngineError> {
        self.require("correct", &[SessionPhase::Paused])?;
        if !self.objects.contains_key(&object_id) {
            return Err(EngineError::UnknownObject(object_id));
        }
        let t = self.current_frame;
        self.check_points(t, &clicks)?;
        let clicks: Vec<PointPrompt> = clicks.into_iter().map(|p| PointPrompt { object_id, ..p }).collect();
        let current = self.working_map(t);
        let p = &self.config.prompts;
        let mask_prompt = encode_mask_prompt(&extract_or_empty(&current, object_id), p.prompt_res, p.logit_mag)?;
        let request = SegmentRequest { frame: &self.video[t], points: &clicks, bbox: None, mask_prompt: Some(&mask_prompt) };
        let result = self.segmenter.segment(&request).map_err(|source| EngineError::Backend { frame: t, source })?;
        if result.mask.is_empty() {
            return Err(EngineError::EmptyMask);
        }
        let map = current.replace_object(object_id, &result.mask)?;
        self.propagator
            .re_anchor(&self.video[t], &map)
            .map_err(|source| EngineError::Backend { frame: t, source })?;
        self.resync = false;

        self.log.append(t, EventBody::Clicked { object_id, purpose: ClickPurpose::Correct, points: clicks.clone() });
        self.log.append(t, EventBody::Corrected { object_id, area: map.area_of(object_id), digest: map.digest() });
        self.log.append(t, EventBody::ReAnchored { cause: AnchorCause::Corrected, digest: map.digest() });
        self.objects.get_mut(&object_id).expect("checked").clicks.extend(clicks);
        self.reset_anchors(t, &map, &[object_id]);
        self.masks[t] = Some(map.clone());
        Ok(map)
    }

    pub fn finish(&mut self) -> Result<(), EngineError> {
        self.require("finish", &[SessionPhase::Tracking])?;
        self.phase = SessionPhase::Finished;
        self.log.append(self.current_frame, EventBody::Finished { frames: self.current_frame + 1 });
        Ok(())
    }

    /// Starts tracking, steps through every remaining frame once and
    /// finishes. Returns the map of every frame.
    pub fn run_one_pass(&mut self) -> Result<Vec<LabelMap>, EngineError> {
        self.require("run_one_pass", &[SessionPhase::Initialized])?;
        self.start()?;
        while self.frames_remaining() > 0 {
            self.track_step()?;
        }
        self.finish()?;
        Ok(self.masks.iter().map(|m| m.clone().expect("every frame emitted")).collect())
    }
}
