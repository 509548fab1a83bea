//! Raster data model: label maps, binary masks, click and box prompts, frames.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Object identifier inside a label map. `0` is background.
pub type ObjectId = u8;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("raster has {actual} values, expected {width}x{height}")]
    RasterSize { width: u32, height: u32, actual: usize },
    #[error("dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: u32, height: u32 },
    #[error("object id 0 is reserved for background")]
    ZeroObjectId,
    #[error("duplicate object id {0}")]
    DuplicateObjectId(ObjectId),
    #[error("raster value {0} is not a declared object id")]
    UndeclaredLabel(u8),
    #[error("unknown object id {0}")]
    UnknownObject(ObjectId),
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("no masks to compose")]
    NothingToCompose,
    #[error("confidence policy has no score for object {0}")]
    MissingConfidence(ObjectId),
    #[error("point ({x},{y}) outside {width}x{height} frame")]
    PointOutOfFrame { x: u32, y: u32, width: u32, height: u32 },
    #[error("invalid box ({x0},{y0})-({x1},{y1}) for {width}x{height} frame")]
    InvalidBox { x0: u32, y0: u32, x1: u32, y1: u32, width: u32, height: u32 },
}

fn check_dims(width: u32, height: u32, len: usize) -> Result<(), MaskError> {
    if width == 0 || height == 0 {
        return Err(MaskError::EmptyDimensions { width, height });
    }
    if len != width as usize * height as usize {
        return Err(MaskError::RasterSize { width, height, actual: len });
    }
    Ok(())
}

/// Per-object boolean raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        check_dims(width, height, bits.len())?;
        Ok(Self { width, height, bits })
    }

    /// All-false mask.
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![false; width as usize * height as usize] }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self { width, height, bits: vec![true; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Axis-aligned filled rectangle `[x0, x1) x [y0, y1)`, clipped to the frame.
    pub fn rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn xor(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.same_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a ^ b).collect();
        Ok(BinaryMask { width: self.width, height: self.height, bits })
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.same_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect();
        Ok(BinaryMask { width: self.width, height: self.height, bits })
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }
}

/// Per-pixel object-ID raster for one frame.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: u32,
    height: u32,
    labels: Vec<u8>,
    object_ids: Vec<ObjectId>,
}

impl LabelMap {
    /// Validates the raster against the declared id set. Ids are stored sorted.
    pub fn new(
        width: u32,
        height: u32,
        labels: Vec<u8>,
        object_ids: impl IntoIterator<Item = ObjectId>,
    ) -> Result<Self, MaskError> {
        check_dims(width, height, labels.len())?;
        let mut ids: Vec<ObjectId> = Vec::new();
        for id in object_ids {
            if id == 0 {
                return Err(MaskError::ZeroObjectId);
            }
            if ids.contains(&id) {
                return Err(MaskError::DuplicateObjectId(id));
            }
            ids.push(id);
        }
        ids.sort_unstable();
        let mut declared = [false; 256];
        declared[0] = true;
        for &id in &ids {
            declared[id as usize] = true;
        }
        if let Some(&bad) = labels.iter().find(|&&v| !declared[v as usize]) {
            return Err(MaskError::UndeclaredLabel(bad));
        }
        Ok(Self { width, height, labels, object_ids: ids })
    }

    /// Builds a map whose declared ids are exactly the nonzero values present.
    pub fn from_raster(width: u32, height: u32, labels: Vec<u8>) -> Result<Self, MaskError> {
        check_dims(width, height, labels.len())?;
        let mut seen = [false; 256];
        for &v in &labels {
            seen[v as usize] = true;
        }
        let ids = (1..=255u8).filter(|&i| seen[i as usize]);
        Self::new(width, height, labels, ids)
    }

    pub fn background(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width as usize * height as usize],
            object_ids: Vec::new(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn object_ids(&self) -> &[ObjectId] {
        &self.object_ids
    }

    pub fn contains_object(&self, id: ObjectId) -> bool {
        self.object_ids.binary_search(&id).is_ok()
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    /// Pixel count carrying `id`.
    pub fn area_of(&self, id: ObjectId) -> usize {
        self.labels.iter().filter(|&&v| v == id).count()
    }

    /// SHA-256 over the raw raster bytes, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.labels))
    }

    /// Copy of this map with `id` added to the declared set (raster unchanged).
    pub fn with_declared(&self, id: ObjectId) -> Result<LabelMap, MaskError> {
        if id == 0 {
            return Err(MaskError::ZeroObjectId);
        }
        let mut out = self.clone();
        if let Err(pos) = out.object_ids.binary_search(&id) {
            out.object_ids.insert(pos, id);
        }
        Ok(out)
    }

    /// Replaces one object's pixels with `mask`. Pixels of other objects under
    /// `mask` are overwritten; the object's old pixels outside `mask` become
    /// background.
    pub fn replace_object(&self, id: ObjectId, mask: &BinaryMask) -> Result<LabelMap, MaskError> {
        if mask.dims() != self.dims() {
            return Err(MaskError::DimensionMismatch(
                self.width,
                self.height,
                mask.width(),
                mask.height(),
            ));
        }
        let mut out = self.with_declared(id)?;
        for (v, &b) in out.labels.iter_mut().zip(mask.bits()) {
            if b {
                *v = id;
            } else if *v == id {
                *v = 0;
            }
        }
        Ok(out)
    }

    /// Renumbers objects; ids missing from `mapping` are dropped to background.
    pub fn relabel(&self, mapping: &BTreeMap<ObjectId, ObjectId>) -> Result<LabelMap, MaskError> {
        let mut table = [0u8; 256];
        for (&from, &to) in mapping {
            table[from as usize] = to;
        }
        let labels = self.labels.iter().map(|&v| table[v as usize]).collect();
        let ids = self
            .object_ids
            .iter()
            .filter_map(|id| mapping.get(id).copied())
            .filter(|&id| id != 0);
        LabelMap::new(self.width, self.height, labels, ids)
    }
}

/// Per-object view of a label map.
pub fn extract_binary(map: &LabelMap, object_id: ObjectId) -> Result<BinaryMask, MaskError> {
    if object_id == 0 || !map.contains_object(object_id) {
        return Err(MaskError::UnknownObject(object_id));
    }
    Ok(extract_unchecked(map, object_id))
}

/// Like [`extract_binary`] but yields an empty mask for undeclared ids.
pub fn extract_or_empty(map: &LabelMap, object_id: ObjectId) -> BinaryMask {
    extract_unchecked(map, object_id)
}

fn extract_unchecked(map: &LabelMap, object_id: ObjectId) -> BinaryMask {
    BinaryMask {
        width: map.width,
        height: map.height,
        bits: map.labels.iter().map(|&v| v == object_id && v != 0).collect(),
    }
}

/// How `compose_labelmap` resolves pixels claimed by more than one mask.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum OverlapPolicy {
    /// The smaller object id keeps the pixel.
    #[default]
    LowerIdWins,
    /// The object with the higher score keeps the pixel; equal scores fall
    /// back to the lower id.
    Confidence(BTreeMap<ObjectId, f64>),
}

/// Merges per-object masks into one label map.
pub fn compose_labelmap(
    masks: &[(ObjectId, BinaryMask)],
    policy: &OverlapPolicy,
) -> Result<LabelMap, MaskError> {
    let (_, first) = masks.first().ok_or(MaskError::NothingToCompose)?;
    let (width, height) = first.dims();
    let mut ids: Vec<ObjectId> = Vec::with_capacity(masks.len());
    for (id, m) in masks {
        if *id == 0 {
            return Err(MaskError::ZeroObjectId);
        }
        if ids.contains(id) {
            return Err(MaskError::DuplicateObjectId(*id));
        }
        first.same_dims(m)?;
        if let OverlapPolicy::Confidence(scores) = policy {
            if !scores.contains_key(id) {
                return Err(MaskError::MissingConfidence(*id));
            }
        }
        ids.push(*id);
    }

    // Order masks by priority so the first claimant of a pixel wins.
    let mut order: Vec<usize> = (0..masks.len()).collect();
    match policy {
        OverlapPolicy::LowerIdWins => order.sort_by_key(|&i| masks[i].0),
        OverlapPolicy::Confidence(scores) => order.sort_by(|&a, &b| {
            let (ia, ib) = (masks[a].0, masks[b].0);
            scores[&ib].total_cmp(&scores[&ia]).then(ia.cmp(&ib))
        }),
    }

    let mut labels = vec![0u8; width as usize * height as usize];
    for &i in &order {
        let (id, m) = &masks[i];
        for (v, &b) in labels.iter_mut().zip(m.bits()) {
            if b && *v == 0 {
                *v = *id;
            }
        }
    }
    LabelMap::new(width, height, labels, ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A single click on a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: u32,
    pub y: u32,
    pub polarity: Polarity,
    pub object_id: ObjectId,
}

impl PointPrompt {
    pub fn positive(x: u32, y: u32, object_id: ObjectId) -> Self {
        Self { x, y, polarity: Polarity::Positive, object_id }
    }

    pub fn negative(x: u32, y: u32, object_id: ObjectId) -> Self {
        Self { x, y, polarity: Polarity::Negative, object_id }
    }

    pub fn is_positive(&self) -> bool {
        self.polarity == Polarity::Positive
    }

    pub fn check_in_frame(&self, width: u32, height: u32) -> Result<(), MaskError> {
        if self.x >= width || self.y >= height {
            return Err(MaskError::PointOutOfFrame { x: self.x, y: self.y, width, height });
        }
        Ok(())
    }
}

/// Box prompt with exclusive upper corner semantics: `x0 < x1`, `y0 < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoxPrompt {
    pub fn check_in_frame(&self, width: u32, height: u32) -> Result<(), MaskError> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(MaskError::InvalidBox {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
                width,
                height,
            });
        }
        Ok(())
    }

    pub fn to_mask(&self, width: u32, height: u32) -> BinaryMask {
        BinaryMask::rect(width, height, self.x0, self.y0, self.x1, self.y1)
    }
}

/// Where a frame's pixels live.
#[derive(Clone, Debug)]
pub enum FrameSource {
    File(PathBuf),
    Raster(Arc<RgbImage>),
    /// No pixel data; consumers that need an image get a black frame.
    Blank,
}

/// One frame of a sequence.
#[derive(Clone, Debug)]
pub struct FrameRef {
    pub sequence_id: String,
    pub frame_index: usize,
    pub width: u32,
    pub height: u32,
    pub source: FrameSource,
}

impl FrameRef {
    pub fn blank(sequence_id: impl Into<String>, frame_index: usize, width: u32, height: u32) -> Self {
        Self { sequence_id: sequence_id.into(), frame_index, width, height, source: FrameSource::Blank }
    }

    pub fn load_rgb(&self) -> image::ImageResult<RgbImage> {
        match &self.source {
            FrameSource::File(p) => Ok(image::open(p)?.to_rgb8()),
            FrameSource::Raster(img) => Ok((**img).clone()),
            FrameSource::Blank => Ok(RgbImage::new(self.width, self.height)),
        }
    }
}

/// Builds blank frames for tests and synthetic runs.
pub fn blank_video(sequence_id: &str, frames: usize, width: u32, height: u32) -> Vec<FrameRef> {
    (0..frames).map(|i| FrameRef::blank(sequence_id, i, width, height)).collect()
}
