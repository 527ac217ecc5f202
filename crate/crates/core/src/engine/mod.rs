//! Reference continuous-batching engine whose device work is a predicted
//! duration.
//!
//! [`EngineCore`] holds scheduling state and is shared by the live engine
//! ([`runtime`]) and the discrete-event oracle ([`crate::des`]).

mod batch;
pub mod ingress;
pub mod runtime;

pub use batch::{EngineCore, KvManager};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ClientError;
use crate::clock::VirtualTimestamp;
use crate::device::{DeviceError, GIB, MIB};
use crate::predictor::{BatchComposition, HardwareSpec, PredictError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestState {
    Queued,
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    pub arrival_virtual: VirtualTimestamp,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    #[serde(default)]
    pub prefill_progress: u32,
    #[serde(default)]
    pub decoded: u32,
    #[serde(default = "queued")]
    pub state: RequestState,
}

fn queued() -> RequestState {
    RequestState::Queued
}

impl Request {
    pub fn new(request_id: u64, arrival_virtual: VirtualTimestamp, prompt_tokens: u32, output_tokens: u32) -> Self {
        Request {
            request_id,
            arrival_virtual,
            prompt_tokens,
            output_tokens,
            prefill_progress: 0,
            decoded: 0,
            state: RequestState::Queued,
        }
    }

    pub fn prefill_remaining(&self) -> u32 {
        self.prompt_tokens - self.prefill_progress
    }

    pub fn in_decode(&self) -> bool {
        self.prefill_progress == self.prompt_tokens && self.decoded < self.output_tokens
    }

    /// Tokens resident in the KV cache.
    pub fn kv_tokens(&self) -> u32 {
        self.prefill_progress + self.decoded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[serde(alias = "MIXED")]
    Mixed,
    #[serde(alias = "PREFILL_PRIORITIZED")]
    PrefillPrioritized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[serde(alias = "TIMEWARP")]
    Timewarp,
    #[serde(alias = "SLEEP")]
    Sleep,
}

impl std::str::FromStr for ExecMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "timewarp" => Ok(ExecMode::Timewarp),
            "sleep" => Ok(ExecMode::Sleep),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExecMode::Timewarp => "timewarp",
            ExecMode::Sleep => "sleep",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub chunk_size: u32,
    pub policy: Policy,
    pub max_batch_tokens: u32,
    pub max_running: u32,
    pub kv_block_tokens: u32,
    pub kv_capacity_blocks: u32,
    pub workers_per_replica: u32,
    pub pp_stages: u32,
    pub mode: ExecMode,
    /// Device bytes backing one KV block.
    pub kv_block_bytes: u64,
    pub device_capacity_bytes: u64,
    pub hardware: HardwareSpec,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            chunk_size: 512,
            policy: Policy::Mixed,
            max_batch_tokens: 512,
            max_running: 256,
            kv_block_tokens: 16,
            kv_capacity_blocks: 16_384,
            workers_per_replica: 1,
            pp_stages: 1,
            mode: ExecMode::Timewarp,
            kv_block_bytes: 2 * MIB,
            device_capacity_bytes: 80 * GIB,
            hardware: HardwareSpec::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1");
        }
        if self.max_batch_tokens < self.chunk_size {
            return bad("max_batch_tokens must be at least chunk_size");
        }
        if self.max_running == 0 || self.kv_block_tokens == 0 || self.kv_capacity_blocks == 0 {
            return bad("max_running, kv_block_tokens and kv_capacity_blocks must be positive");
        }
        if self.workers_per_replica == 0 || self.pp_stages == 0 {
            return bad("workers_per_replica and pp_stages must be positive");
        }
        if self.kv_pool_bytes() > self.device_capacity_bytes {
            return bad("KV pool does not fit in device memory");
        }
        Ok(())
    }

    pub fn kv_pool_bytes(&self) -> u64 {
        self.kv_capacity_blocks as u64 * self.kv_block_bytes
    }

    /// Time-jump actors one replica registers.
    pub fn actor_count(&self) -> usize {
        (self.workers_per_replica * self.pp_stages) as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub composition: BatchComposition,
    /// KV blocks this step adds to the live set.
    pub kv_blocks_needed: u32,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.composition.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenKind {
    FirstToken,
    OutputToken,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenEvent {
    pub request_id: u64,
    pub kind: TokenKind,
    pub virtual_ts_ns: VirtualTimestamp,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error("request {request_id} needs {blocks} KV blocks but the pool has {capacity}")]
    RequestTooLarge { request_id: u64, blocks: u32, capacity: u32 },
    #[error("request {0} has zero prompt or output tokens")]
    EmptyRequest(u64),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("engine invariant violated: {0}")]
    Invariant(String),
    #[error("worker failure: {0}")]
    Worker(String),
    #[error("run aborted")]
    Aborted,
}
