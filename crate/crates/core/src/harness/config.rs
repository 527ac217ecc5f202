use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::workload::WorkloadSpec;
use crate::barrier::{BarrierConfig, FaultConfig};
use crate::engine::EngineConfig;
use crate::predictor::PredictorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimekeeperSettings {
    pub request_endpoint: String,
    pub broadcast_endpoint: String,
    /// Where the engine accepts submissions in multi-process runs.
    pub engine_endpoint: String,
    pub jitter_cooldown_us: u64,
    /// Probability of silently dropping each clock broadcast.
    pub drop_broadcasts: f64,
    pub fault_seed: u64,
}

impl Default for TimekeeperSettings {
    fn default() -> Self {
        TimekeeperSettings {
            request_endpoint: "127.0.0.1:0".into(),
            broadcast_endpoint: "127.0.0.1:0".into(),
            engine_endpoint: "127.0.0.1:0".into(),
            jitter_cooldown_us: 500,
            drop_broadcasts: 0.0,
            fault_seed: 0,
        }
    }
}

impl TimekeeperSettings {
    pub fn barrier_config(&self, expect_actors: Option<usize>) -> BarrierConfig {
        BarrierConfig {
            cooldown: Duration::from_micros(self.jitter_cooldown_us),
            expect_actors,
            faults: FaultConfig {
                drop_broadcast_probability: self.drop_broadcasts,
                seed: self.fault_seed,
            },
        }
    }
}

/// Everything a benchmark run needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub engine: EngineConfig,
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub timekeeper: TimekeeperSettings,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Hash of the settings that determine a run's results. Execution mode
    /// and endpoints are excluded so timewarp and sleep runs of one
    /// configuration compare equal.
    pub fn fingerprint(&self) -> String {
        let mut engine = self.engine.clone();
        engine.mode = crate::engine::ExecMode::Timewarp;
        let doc = serde_json::json!({
            "workload": self.workload,
            "engine": engine,
            "predictor": self.predictor,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }
}
