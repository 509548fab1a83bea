//! Wire types and raster codecs. Rasters travel as base64: frames as RGB
//! PNG, masks and label maps as indexed PNG, float fields as little-endian
//! `f32`, row-major.

use std::io::Cursor;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use trackany_core::mask::{BinaryMask, BoxPrompt, FrameRef, FrameSource, LabelMap, PointPrompt, Polarity};
use trackany_core::pngio::{read_mask_png, write_mask_png, PngError};
use trackany_core::prompts::MaskPrompt;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("mask png: {0}")]
    Png(#[from] PngError),
    #[error("frame image: {0}")]
    Image(#[from] image::ImageError),
    #[error("float raster has {got} bytes, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMsg {
    pub seq: String,
    pub index: usize,
    pub png_b64: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMsg {
    pub x: u32,
    pub y: u32,
    pub polarity: Polarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxMsg {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPromptMsg {
    pub res: u32,
    pub logits_b64_f32le: String,
    pub src_w: u32,
    pub src_h: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequestMsg {
    pub frame: FrameMsg,
    pub points: Vec<PointMsg>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoxMsg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_prompt: Option<MaskPromptMsg>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponseMsg {
    pub mask_png_b64: String,
    pub confidence: f64,
}

/// Body of both `/v1/propagate/init` and `/v1/propagate/reanchor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRequestMsg {
    pub session: String,
    pub frame: FrameMsg,
    pub labelmap_png_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OkMsg {
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRequestMsg {
    pub session: String,
    pub frame: FrameMsg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMsg {
    pub object_id: u8,
    pub f32le_b64: String,
    pub w: u32,
    pub h: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResponseMsg {
    pub labelmap_png_b64: String,
    pub affinities: Vec<AffinityMsg>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthMsg {
    pub ok: bool,
    pub engine_version: String,
}

pub fn encode_f32le(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

/// Decodes exactly `len` floats.
pub fn decode_f32le(b64: &str, len: usize) -> Result<Vec<f32>, ProtocolError> {
    let bytes = B64.decode(b64)?;
    if bytes.len() != len * 4 {
        return Err(ProtocolError::Length { expected: len * 4, got: bytes.len() });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn encode_frame(frame: &FrameRef) -> Result<FrameMsg, ProtocolError> {
    let rgb = frame.load_rgb()?;
    let mut png = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
    Ok(FrameMsg { seq: frame.sequence_id.clone(), index: frame.frame_index, png_b64: B64.encode(png) })
}

pub fn decode_frame(msg: &FrameMsg) -> Result<FrameRef, ProtocolError> {
    let bytes = B64.decode(&msg.png_b64)?;
    let rgb = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8();
    Ok(FrameRef {
        sequence_id: msg.seq.clone(),
        frame_index: msg.index,
        width: rgb.width(),
        height: rgb.height(),
        source: FrameSource::Raster(Arc::new(rgb)),
    })
}

pub fn encode_labelmap(map: &LabelMap) -> Result<String, ProtocolError> {
    Ok(B64.encode(write_mask_png(map)?))
}

pub fn decode_labelmap(b64: &str) -> Result<LabelMap, ProtocolError> {
    Ok(read_mask_png(&B64.decode(b64)?)?)
}

/// A binary mask as an indexed PNG with index 1 for the object.
pub fn encode_mask(mask: &BinaryMask) -> Result<String, ProtocolError> {
    let labels = mask.bits().iter().map(|&b| b as u8).collect();
    let map = LabelMap::new(mask.width(), mask.height(), labels, vec![1]).map_err(|e| ProtocolError::Invalid(e.to_string()))?;
    encode_labelmap(&map)
}

/// Rejects any index other than 0 and 1.
pub fn decode_mask(b64: &str) -> Result<BinaryMask, ProtocolError> {
    let map = decode_labelmap(b64)?;
    if let Some(v) = map.labels().iter().find(|&&v| v > 1) {
        return Err(ProtocolError::Invalid(format!("mask contains index {v}; only 0 and 1 are allowed")));
    }
    let bits = map.labels().iter().map(|&v| v == 1).collect();
    BinaryMask::new(map.width(), map.height(), bits).map_err(|e| ProtocolError::Invalid(e.to_string()))
}

impl From<&PointPrompt> for PointMsg {
    fn from(p: &PointPrompt) -> Self {
        Self { x: p.x, y: p.y, polarity: p.polarity }
    }
}

impl PointMsg {
    pub fn to_prompt(self) -> PointPrompt {
        PointPrompt { x: self.x, y: self.y, polarity: self.polarity, object_id: 1 }
    }
}

impl From<BoxPrompt> for BoxMsg {
    fn from(b: BoxPrompt) -> Self {
        Self { x0: b.x0, y0: b.y0, x1: b.x1, y1: b.y1 }
    }
}

impl From<BoxMsg> for BoxPrompt {
    fn from(b: BoxMsg) -> Self {
        Self { x0: b.x0, y0: b.y0, x1: b.x1, y1: b.y1 }
    }
}

impl From<&MaskPrompt> for MaskPromptMsg {
    fn from(m: &MaskPrompt) -> Self {
        Self { res: m.res, logits_b64_f32le: encode_f32le(&m.logits), src_w: m.src_width, src_h: m.src_height }
    }
}

impl MaskPromptMsg {
    pub fn to_prompt(&self) -> Result<MaskPrompt, ProtocolError> {
        let n = (self.res as usize).pow(2);
        let logits = decode_f32le(&self.logits_b64_f32le, n)?;
        Ok(MaskPrompt { res: self.res, logits, src_width: self.src_w, src_height: self.src_h })
    }
}
