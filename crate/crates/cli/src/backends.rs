//! Backend registry: `synthetic` or `remote:<url>`.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use trackany_core::backend::{
    DegradationConfig, Propagator, Segmenter, SyntheticOraclePropagator, SyntheticScene, SyntheticSegmenter,
};
use trackany_core::LabelMap;
use trackany_remote::{RemoteClient, RemoteConfig, RemotePropagator, RemoteSegmenter};

use crate::error::CliError;

/// A resolved backend choice. Its JSON form is recorded in every event log
/// header so that `replay` can rebuild the same backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Synthetic {
        #[serde(flatten)]
        degradation: DegradationConfig,
    },
    Remote {
        url: String,
        strict: bool,
        timeout_ms: u64,
        retries: u32,
    },
}

/// Backend-facing options that are not part of the spec string.
#[derive(Clone, Debug, PartialEq)]
pub struct BackendOptions {
    pub degradation: DegradationConfig,
    pub strict: bool,
    pub timeout: Duration,
    pub retries: u32,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self { degradation: DegradationConfig::default(), strict: true, timeout: Duration::from_secs(30), retries: 2 }
    }
}

pub struct Backends {
    pub segmenter: Arc<dyn Segmenter>,
    pub propagator: Box<dyn Propagator>,
}

impl BackendConfig {
    /// Parses `synthetic` or `remote:<url>`.
    pub fn parse(spec: &str, options: &BackendOptions) -> Result<Self, CliError> {
        let spec = spec.trim();
        if spec == "synthetic" {
            return Ok(BackendConfig::Synthetic { degradation: options.degradation.clone() });
        }
        if let Some(url) = spec.strip_prefix("remote:") {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(CliError::Config(format!("remote backend url must be http(s), got {url:?}")));
            }
            return Ok(BackendConfig::Remote {
                url: url.trim_end_matches('/').to_string(),
                strict: options.strict,
                timeout_ms: options.timeout.as_millis() as u64,
                retries: options.retries,
            });
        }
        Err(CliError::Config(format!("unknown backend {spec:?}; expected synthetic or remote:<url>")))
    }

    pub fn describe(&self) -> String {
        serde_json::to_string(self).expect("backend config serializes")
    }

    /// Inverse of [`describe`](Self::describe).
    pub fn from_description(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("log header names no known backend: {e}")))
    }

    pub fn needs_groundtruth(&self) -> bool {
        matches!(self, BackendConfig::Synthetic { .. })
    }

    fn client(&self) -> Option<RemoteClient> {
        match self {
            BackendConfig::Remote { url, strict, timeout_ms, retries } => {
                let mut cfg = RemoteConfig::new(url.clone());
                cfg.strict = *strict;
                cfg.timeout = Duration::from_millis(*timeout_ms);
                cfg.retries = *retries;
                Some(RemoteClient::new(cfg))
            }
            BackendConfig::Synthetic { .. } => None,
        }
    }

    /// Checks that a remote backend answers its health endpoint.
    pub fn handshake(&self) -> Result<(), CliError> {
        if let Some(client) = self.client() {
            let health = client.health().map_err(|source| CliError::Backend { sequence: "-".into(), source })?;
            tracing::info!(engine_version = %health.engine_version, "remote backend reachable");
        }
        Ok(())
    }

    /// Fresh backends for one sequence. The synthetic backend serves
    /// `groundtruth`, which must cover every frame.
    pub fn build(&self, sequence_id: &str, groundtruth: Option<Vec<LabelMap>>) -> Result<Backends, CliError> {
        match self {
            BackendConfig::Synthetic { degradation } => {
                let gt = groundtruth.ok_or_else(|| CliError::Groundtruth {
                    sequence: sequence_id.to_string(),
                    message: "the synthetic backend needs an annotation for every frame".into(),
                })?;
                let scene = SyntheticScene::new().with_sequence(sequence_id, gt.clone());
                Ok(Backends {
                    segmenter: Arc::new(SyntheticSegmenter::new(scene)),
                    propagator: Box::new(SyntheticOraclePropagator::new(Arc::new(gt), degradation.clone())),
                })
            }
            BackendConfig::Remote { .. } => {
                let client = self.client().expect("remote");
                Ok(Backends {
                    segmenter: Arc::new(RemoteSegmenter::new(client.clone())),
                    propagator: Box::new(RemotePropagator::new(client)),
                })
            }
        }
    }
}
