//! Interactive video object segmentation with automatic failure detection
//! and click-based correction.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the engine and reports.

pub mod backend;
pub mod davis;
pub mod engine;
pub mod mask;
pub mod metrics;
pub mod morphology;
pub mod pngio;
pub mod prompts;
pub mod scalar;

pub use mask::{BinaryMask, BoxPrompt, FrameRef, FrameSource, LabelMap, MaskError, ObjectId, PointPrompt, Polarity};
pub use scalar::Scalar;

/// Per-object affinity as carried over the wire and through the engine.
pub type Affinity = prompts::AffinityField<f32>;
pub type ObjectScore = metrics::ObjectScore<f64>;
pub type SequenceResult = metrics::SequenceResult<f64>;
pub type DatasetResult = metrics::DatasetResult<f64>;
