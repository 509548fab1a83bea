//! Segmenter and propagator interfaces.
//!
//! A segmenter turns prompts on a single frame into one object mask. A
//! propagator carries a label map forward through a video and reports a
//! per-object affinity field alongside each predicted map.

mod synthetic;

use std::time::Duration;

use thiserror::Error;

pub use synthetic::{DegradationConfig, SyntheticOraclePropagator, SyntheticScene, SyntheticSegmenter};

use crate::mask::{BinaryMask, BoxPrompt, FrameRef, LabelMap, MaskError, PointPrompt};
use crate::prompts::MaskPrompt;
use crate::Affinity;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, retry_after: Option<Duration>, message: String },
    #[error("backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response violates protocol schema: {0}")]
    Schema(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("segment request carries no prompt")]
    NoPrompt,
    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),
    #[error("propagator stepped before init")]
    NotInitialized,
    #[error("frame {got} presented after frame {last}")]
    OutOfOrder { last: usize, got: usize },
    #[error("frame {index} is beyond the {len}-frame sequence")]
    BeyondSequence { index: usize, len: usize },
    #[error("no groundtruth for sequence {sequence:?} frame {index}")]
    UnknownFrame { sequence: String, index: usize },
    #[error("invalid label map: {0}")]
    InvalidMap(String),
}

impl From<MaskError> for BackendError {
    fn from(e: MaskError) -> Self {
        BackendError::MalformedPrompt(e.to_string())
    }
}

/// Prompts for one segmentation call.
#[derive(Clone, Copy, Debug)]
pub struct SegmentRequest<'a> {
    pub frame: &'a FrameRef,
    pub points: &'a [PointPrompt],
    pub bbox: Option<BoxPrompt>,
    pub mask_prompt: Option<&'a MaskPrompt>,
}

impl<'a> SegmentRequest<'a> {
    pub fn points(frame: &'a FrameRef, points: &'a [PointPrompt]) -> Self {
        Self { frame, points, bbox: None, mask_prompt: None }
    }

    /// Checks the shared preconditions: some prompt present, all in frame.
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.points.is_empty() && self.bbox.is_none() && self.mask_prompt.is_none() {
            return Err(BackendError::NoPrompt);
        }
        let (w, h) = (self.frame.width, self.frame.height);
        for p in self.points {
            p.check_in_frame(w, h)?;
        }
        if let Some(b) = self.bbox {
            b.check_in_frame(w, h)?;
        }
        if let Some(m) = self.mask_prompt {
            if m.res == 0 || m.logits.len() != (m.res as usize).pow(2) {
                return Err(BackendError::MalformedPrompt(format!(
                    "mask prompt grid has {} values for resolution {}",
                    m.logits.len(),
                    m.res
                )));
            }
            if (m.src_width, m.src_height) != (w, h) {
                return Err(BackendError::MalformedPrompt(format!(
                    "mask prompt source {}x{} differs from frame {w}x{h}",
                    m.src_width, m.src_height
                )));
            }
            if m.logits.iter().any(|v| !v.is_finite()) {
                return Err(BackendError::MalformedPrompt("non-finite mask logits".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentResult {
    pub mask: BinaryMask,
    pub confidence: f64,
}

/// Prompted single-frame segmentation. Must be callable from several
/// sessions at once.
pub trait Segmenter: Send + Sync {
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<SegmentResult, BackendError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagateResult {
    pub label_map: LabelMap,
    pub affinities: Vec<Affinity>,
}

impl PropagateResult {
    /// One affinity per declared object, matching dimensions.
    pub fn validate(&self) -> Result<(), BackendError> {
        let mut ids: Vec<_> = self.affinities.iter().map(|a| a.object_id()).collect();
        ids.sort_unstable();
        if ids != self.label_map.object_ids() {
            return Err(BackendError::Schema(format!(
                "affinity ids {ids:?} differ from label map ids {:?}",
                self.label_map.object_ids()
            )));
        }
        if let Some(a) = self.affinities.iter().find(|a| a.dims() != self.label_map.dims()) {
            return Err(BackendError::Schema(format!(
                "affinity for object {} is {:?}, map is {:?}",
                a.object_id(),
                a.dims(),
                self.label_map.dims()
            )));
        }
        Ok(())
    }

    pub fn affinity(&self, id: crate::mask::ObjectId) -> Option<&Affinity> {
        self.affinities.iter().find(|a| a.object_id() == id)
    }
}

/// Stateful mask propagation through one video. Frames arrive in strictly
/// increasing index order; `re_anchor` may repeat the last stepped frame.
pub trait Propagator: Send {
    fn init(&mut self, frame: &FrameRef, map: &LabelMap) -> Result<(), BackendError>;
    fn step(&mut self, frame: &FrameRef) -> Result<PropagateResult, BackendError>;
    fn re_anchor(&mut self, frame: &FrameRef, map: &LabelMap) -> Result<(), BackendError>;
}

impl<P: Propagator + ?Sized> Propagator for Box<P> {
    fn init(&mut self, frame: &FrameRef, map: &LabelMap) -> Result<(), BackendError> {
        (**self).init(frame, map)
    }

    fn step(&mut self, frame: &FrameRef) -> Result<PropagateResult, BackendError> {
        (**self).step(frame)
    }

    fn re_anchor(&mut self, frame: &FrameRef, map: &LabelMap) -> Result<(), BackendError> {
        (**self).re_anchor(frame, map)
    }
}

impl<S: Segmenter + ?Sized> Segmenter for std::sync::Arc<S> {
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<SegmentResult, BackendError> {
        (**self).segment(request)
    }
}
