//! Command-line tools and session service for interactive video object
//! segmentation.

pub mod backends;
pub mod error;
pub mod eval;
pub mod service;
pub mod synth;

pub use backends::{BackendConfig, BackendOptions};
pub use error::CliError;
pub use eval::{run_eval, EvalConfig, Results};
pub use service::{RunningService, ServeConfig};
pub use synth::{make_synthetic_dataset, SynthSpec};
