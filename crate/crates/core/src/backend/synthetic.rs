//! Groundtruth-driven stand-ins for real models.
//!
//! The segmenter answers prompts by looking up groundtruth components. The
//! propagator replays groundtruth but shrinks every object by an erosion
//! depth that grows with the number of frames since the last anchor, which
//! reproduces the long-video shrinkage failure deterministically.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BackendError, PropagateResult, Propagator, SegmentRequest, SegmentResult, Segmenter};
use crate::mask::{compose_labelmap, extract_or_empty, BinaryMask, FrameRef, LabelMap, ObjectId, OverlapPolicy};
use crate::morphology::{chessboard_distance_to, components, depth_map, erode, UNREACHABLE};
use crate::prompts::AffinityField;
use crate::Affinity;

/// Groundtruth label maps per sequence id.
#[derive(Clone, Debug, Default)]
pub struct SyntheticScene {
    sequences: BTreeMap<String, Arc<Vec<LabelMap>>>,
}

impl SyntheticScene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sequence(mut self, sequence_id: impl Into<String>, gt: Vec<LabelMap>) -> Self {
        self.insert(sequence_id, gt);
        self
    }

    pub fn insert(&mut self, sequence_id: impl Into<String>, gt: Vec<LabelMap>) {
        self.sequences.insert(sequence_id.into(), Arc::new(gt));
    }

    pub fn sequence(&self, sequence_id: &str) -> Option<Arc<Vec<LabelMap>>> {
        self.sequences.get(sequence_id).cloned()
    }

    pub fn frame(&self, sequence_id: &str, index: usize) -> Result<&LabelMap, BackendError> {
        self.sequences
            .get(sequence_id)
            .and_then(|s| s.get(index))
            .ok_or_else(|| BackendError::UnknownFrame { sequence: sequence_id.to_string(), index })
    }
}

/// Prompt semantics: the union of groundtruth components hit by a positive
/// click, minus components hit by a negative click. With no clicks, the
/// object overlapping the mask prompt (or box) most is returned whole.
#[derive(Clone, Debug)]
pub struct SyntheticSegmenter {
    scene: SyntheticScene,
}

impl SyntheticSegmenter {
    pub fn new(scene: SyntheticScene) -> Self {
        Self { scene }
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }
}

fn object_masks(gt: &LabelMap) -> Vec<(ObjectId, BinaryMask)> {
    gt.object_ids().iter().map(|&id| (id, extract_or_empty(gt, id))).collect()
}

impl Segmenter for SyntheticSegmenter {
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<SegmentResult, BackendError> {
        request.validate()?;
        let frame = request.frame;
        let gt = self.scene.frame(&frame.sequence_id, frame.frame_index)?;
        if gt.dims() != (frame.width, frame.height) {
            return Err(BackendError::InvalidMap(format!(
                "groundtruth is {:?}, frame is {}x{}",
                gt.dims(),
                frame.width,
                frame.height
            )));
        }
        let (w, h) = gt.dims();
        let mut out = BinaryMask::empty(w, h);

        if !request.points.is_empty() {
            for (_, mask) in object_masks(gt) {
                for comp in components(&mask) {
                    let hit = |positive: bool| {
                        request.points.iter().any(|p| {
                            p.is_positive() == positive && comp.pixels.binary_search(&((p.y * w + p.x) as usize)).is_ok()
                        })
                    };
                    if hit(true) && !hit(false) {
                        for &i in &comp.pixels {
                            out.set(i as u32 % w, i as u32 / w, true);
                        }
                    }
                }
            }
        } else {
            let prompt = match (request.mask_prompt, request.bbox) {
                (Some(m), _) => m.decode(),
                (None, Some(b)) => b.to_mask(w, h),
                (None, None) => unreachable!("validated"),
            };
            let best = object_masks(gt)
                .into_iter()
                .map(|(id, m)| (m.intersection_count(&prompt), id, m))
                .filter(|(overlap, _, _)| *overlap > 0)
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            if let Some((_, _, m)) = best {
                out = m;
            }
        }
        let confidence = if out.is_empty() { 0.0 } else { 1.0 };
        Ok(SegmentResult { mask: out, confidence })
    }
}

/// Shrinkage model of the oracle propagator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    /// Erosion depth gained per frame since the last anchor, in pixels.
    pub erosion_base: f64,
    /// Width of the affinity ramp outside the emitted mask, in pixels.
    pub affinity_sharpness: f64,
    /// Recorded with the run for reproducibility. The erosion model itself
    /// is deterministic and draws no random numbers.
    #[serde(default)]
    pub noise_seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self { erosion_base: 0.0, affinity_sharpness: 16.0, noise_seed: 0 }
    }
}

impl DegradationConfig {
    pub fn new(erosion_base: f64, affinity_sharpness: f64) -> Result<Self, String> {
        if !(erosion_base >= 0.0 && erosion_base.is_finite()) {
            return Err(format!("erosion_base must be >= 0, got {erosion_base}"));
        }
        if !(affinity_sharpness > 0.0 && affinity_sharpness.is_finite()) {
            return Err(format!("affinity_sharpness must be > 0, got {affinity_sharpness}"));
        }
        Ok(Self { erosion_base, affinity_sharpness, noise_seed: 0 })
    }

    /// Erosion depth `floor(erosion_base * frames_since_anchor)`.
    pub fn depth_after(&self, frames_since_anchor: usize) -> u32 {
        (self.erosion_base * frames_since_anchor as f64).floor() as u32
    }
}

/// How one tracked object relates to the groundtruth at the last anchor.
#[derive(Clone, Debug, PartialEq)]
struct Track {
    id: ObjectId,
    /// Groundtruth object the anchor mask overlapped most; `None` when lost.
    gt_id: Option<ObjectId>,
    /// Erosion depth already present in the anchor mask.
    deficit: u32,
}

/// Replays groundtruth eroded by `deficit + floor(erosion_base * (t - a))`
/// where `a` is the last anchor frame and `deficit` measures how far the
/// anchor mask itself fell short of the groundtruth. Never emits a pixel
/// outside the groundtruth object.
///
/// Affinity is 1 on the emitted mask, `clamp(1 - d / sharpness)` on the
/// eroded-away groundtruth band where `d` is the chessboard distance to the
/// emitted mask, and 0 elsewhere.
#[derive(Debug)]
pub struct SyntheticOraclePropagator {
    gt: Arc<Vec<LabelMap>>,
    config: DegradationConfig,
    anchor: Option<usize>,
    last: usize,
    tracks: Vec<Track>,
}

impl SyntheticOraclePropagator {
    pub fn new(gt: Arc<Vec<LabelMap>>, config: DegradationConfig) -> Self {
        Self { gt, config, anchor: None, last: 0, tracks: Vec::new() }
    }

    pub fn config(&self) -> &DegradationConfig {
        &self.config
    }

    fn gt_frame(&self, index: usize) -> Result<&LabelMap, BackendError> {
        self.gt.get(index).ok_or(BackendError::BeyondSequence { index, len: self.gt.len() })
    }

    fn anchor_at(&mut self, frame: &FrameRef, map: &LabelMap) -> Result<(), BackendError> {
        let gt = self.gt_frame(frame.frame_index)?;
        if gt.dims() != map.dims() {
            return Err(BackendError::InvalidMap(format!("map is {:?}, groundtruth is {:?}", map.dims(), gt.dims())));
        }
        let gt_objects = object_masks(gt);
        let mut tracks = Vec::with_capacity(map.object_ids().len());
        for &id in map.object_ids() {
            let anchor = extract_or_empty(map, id);
            let best = gt_objects
                .iter()
                .map(|(gid, g)| (anchor.intersection_count(g), *gid, g))
                .filter(|(overlap, _, _)| *overlap > 0)
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            let track = match best {
                None => Track { id, gt_id: None, deficit: 0 },
                Some((_, gid, g)) => {
                    let depth = depth_map(g);
                    let deficit = g
                        .bits()
                        .iter()
                        .zip(anchor.bits())
                        .zip(&depth)
                        .filter(|((&in_gt, &in_anchor), _)| in_gt && !in_anchor)
                        .map(|(_, &d)| d)
                        .max()
                        .unwrap_or(0);
                    Track { id, gt_id: Some(gid), deficit }
                }
            };
            tracks.push(track);
        }
        self.tracks = tracks;
        self.anchor = Some(frame.frame_index);
        self.last = frame.frame_index;
        Ok(())
    }

    fn affinity_for(&self, id: ObjectId, emitted: &BinaryMask, gt_obj: &BinaryMask) -> Affinity {
        let dist = chessboard_distance_to(emitted);
        let sigma = self.config.affinity_sharpness;
        let values = emitted
            .bits()
            .iter()
            .zip(gt_obj.bits())
            .zip(&dist)
            .map(|((&inside, &in_gt), &d)| {
                if inside {
                    1.0
                } else if in_gt && d != UNREACHABLE {
                    (1.0 - d as f64 / sigma).clamp(0.0, 1.0) as f32
                } else {
                    0.0
                }
            })
            .collect();
        AffinityField::new(id, emitted.width(), emitted.height(), values).expect("frame dims")
    }
}

impl Propagator for SyntheticOraclePropagator {
    fn init(&mut self, frame: &FrameRef, map: &LabelMap) -> Result<(), BackendError> {
        self.anchor_at(frame, map)
    }

    fn step(&mut self, frame: &FrameRef) -> Result<PropagateResult, BackendError> {
        let anchor = self.anchor.ok_or(BackendError::NotInitialized)?;
        let t = frame.frame_index;
        if t <= self.last {
            return Err(BackendError::OutOfOrder { last: self.last, got: t });
        }
        let gt = self.gt_frame(t)?;
        let (w, h) = gt.dims();
        let erosion = self.config.depth_after(t - anchor);
        let mut masks = Vec::with_capacity(self.tracks.len());
        let mut affinities = Vec::with_capacity(self.tracks.len());
        for track in &self.tracks {
            let gt_obj = match track.gt_id {
                Some(gid) => extract_or_empty(gt, gid),
                None => BinaryMask::empty(w, h),
            };
            let emitted = erode(&gt_obj, track.deficit.saturating_add(erosion));
            affinities.push(self.affinity_for(track.id, &emitted, &gt_obj));
            masks.push((track.id, emitted));
        }
        let label_map = if masks.is_empty() {
            LabelMap::background(w, h)
        } else {
            compose_labelmap(&masks, &OverlapPolicy::LowerIdWins).map_err(|e| BackendError::InvalidMap(e.to_string()))?
        };
        self.last = t;
        Ok(PropagateResult { label_map, affinities })
    }

    fn re_anchor(&mut self, frame: &FrameRef, map: &LabelMap) -> Result<(), BackendError> {
        if self.anchor.is_none() {
            return Err(BackendError::NotInitialized);
        }
        if frame.frame_index < self.last {
            return Err(BackendError::OutOfOrder { last: self.last, got: frame.frame_index });
        }
        self.anchor_at(frame, map)
    }
}
