use std::io;
use std::path::PathBuf;

use thiserror::Error;
use trackany_core::backend::BackendError;
use trackany_core::davis::DavisError;
use trackany_core::engine::{EngineError, ReplayError};
use trackany_core::metrics::MetricError;

use crate::synth::SynthError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const BACKEND: i32 = 3;
    pub const MISMATCH: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Dataset(#[from] DavisError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("sequence {sequence}: {source}")]
    Backend { sequence: String, source: BackendError },
    #[error("sequence {sequence}: {source}")]
    Engine { sequence: String, source: EngineError },
    #[error("sequence {sequence}: {source}")]
    Metric { sequence: String, source: MetricError },
    #[error("sequence {sequence}: {message}")]
    Groundtruth { sequence: String, message: String },
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Dataset(_) | CliError::Synth(_) => exit::CONFIG,
            CliError::Backend { .. } => exit::BACKEND,
            CliError::Engine { source: EngineError::Backend { .. }, .. } => exit::BACKEND,
            CliError::Engine { .. } => exit::CONFIG,
            CliError::Replay(ReplayError::Engine(EngineError::Backend { .. })) => exit::BACKEND,
            CliError::Metric { .. } | CliError::Groundtruth { .. } | CliError::Replay(_) => exit::MISMATCH,
        }
    }
}
