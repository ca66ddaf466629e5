//! Simulated inference-engine replica.
//!
//! [`scheduler::BatchScheduler`] is the pure continuous-batching state
//! machine. [`runtime`] drives it on a wall or virtual clock, and
//! [`server`] exposes a replica over the framed TCP protocol.

pub mod runtime;
pub mod scheduler;
pub mod server;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use runtime::{ClockMode, EngineHandle, StreamItem};
pub use scheduler::{BatchScheduler, EngineStats, KvPolicy, SchedEvent, StepOutcome};
pub use server::{EngineServer, FaultPlan};

/// Affine timing model of one replica, in integer nanoseconds.
///
/// Prefill of an `L`-token prompt takes `prefill_base + prefill_per_token·L`;
/// one decode iteration over a batch of `b` requests takes
/// `decode_base + decode_per_slot·b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LatencyModel {
    pub prefill_base_ns: u64,
    pub prefill_per_token_ns: u64,
    pub decode_base_ns: u64,
    pub decode_per_slot_ns: u64,
}

fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round().max(0.0) as u64
}

impl LatencyModel {
    pub fn from_millis(prefill_base: f64, prefill_per_token: f64, decode_base: f64, decode_per_slot: f64) -> Self {
        Self {
            prefill_base_ns: ms_to_ns(prefill_base),
            prefill_per_token_ns: ms_to_ns(prefill_per_token),
            decode_base_ns: ms_to_ns(decode_base),
            decode_per_slot_ns: ms_to_ns(decode_per_slot),
        }
    }

    pub fn prefill(&self, prompt_tokens: u32) -> Duration {
        Duration::from_nanos(self.prefill_base_ns + self.prefill_per_token_ns * u64::from(prompt_tokens))
    }

    pub fn decode(&self, batch: usize) -> Duration {
        Duration::from_nanos(self.decode_base_ns + self.decode_per_slot_ns * batch as u64)
    }

    /// Tokens per second of one decode iteration at batch size `batch`.
    pub fn batch_efficiency(&self, batch: usize) -> f64 {
        batch as f64 / self.decode(batch).as_secs_f64()
    }
}

/// Latency coefficients in milliseconds, the form used in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyMillis {
    pub prefill_base_ms: f64,
    pub prefill_per_token_ms: f64,
    pub decode_base_ms: f64,
    pub decode_per_slot_ms: f64,
}

impl From<LatencyMillis> for LatencyModel {
    fn from(m: LatencyMillis) -> Self {
        LatencyModel::from_millis(m.prefill_base_ms, m.prefill_per_token_ms, m.decode_base_ms, m.decode_per_slot_ms)
    }
}

impl From<LatencyModel> for LatencyMillis {
    fn from(m: LatencyModel) -> Self {
        LatencyMillis {
            prefill_base_ms: m.prefill_base_ns as f64 / 1e6,
            prefill_per_token_ms: m.prefill_per_token_ns as f64 / 1e6,
            decode_base_ms: m.decode_base_ns as f64 / 1e6,
            decode_per_slot_ms: m.decode_per_slot_ns as f64 / 1e6,
        }
    }
}

/// Parallelism shape and capacity of one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaConfig {
    pub replica_id: String,
    pub tp_degree: u32,
    pub ep_degree: u32,
    pub gpu_count: u32,
    pub latency: LatencyModel,
    pub kv_capacity_tokens: u64,
    pub max_batch: usize,
    /// Submissions beyond this many waiting requests are rejected.
    pub max_waiting: usize,
    pub kv_policy: KvPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("replica {id}: {field} must be positive")]
    NotPositive { id: String, field: &'static str },
    #[error("replica {id}: tp {tp} x ep {ep} does not equal gpu count {gpus}")]
    GpuMismatch { id: String, tp: u32, ep: u32, gpus: u32 },
    #[error("{0}")]
    Invalid(String),
}

impl ReplicaConfig {
    pub fn new(replica_id: impl Into<String>, tp_degree: u32, ep_degree: u32, latency: LatencyModel) -> Self {
        Self {
            replica_id: replica_id.into(),
            tp_degree,
            ep_degree,
            gpu_count: tp_degree * ep_degree,
            latency,
            kv_capacity_tokens: 1 << 20,
            max_batch: 64,
            max_waiting: 4096,
            kv_policy: KvPolicy::default(),
        }
    }

    pub fn with_capacity(mut self, kv_capacity_tokens: u64, max_batch: usize) -> Self {
        self.kv_capacity_tokens = kv_capacity_tokens;
        self.max_batch = max_batch;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let id = || self.replica_id.clone();
        for (field, v) in [
            ("tp", u64::from(self.tp_degree)),
            ("ep", u64::from(self.ep_degree)),
            ("gpus", u64::from(self.gpu_count)),
            ("kv_capacity", self.kv_capacity_tokens),
            ("max_batch", self.max_batch as u64),
        ] {
            if v == 0 {
                return Err(ConfigError::NotPositive { id: id(), field });
            }
        }
        if self.tp_degree * self.ep_degree != self.gpu_count {
            return Err(ConfigError::GpuMismatch {
                id: id(),
                tp: self.tp_degree,
                ep: self.ep_degree,
                gpus: self.gpu_count,
            });
        }
        Ok(())
    }

    /// Short label such as `TP8` or `EP2-TP4`.
    pub fn shape_label(&self) -> String {
        if self.ep_degree > 1 {
            format!("EP{}-TP{}", self.ep_degree, self.tp_degree)
        } else {
            format!("TP{}", self.tp_degree)
        }
    }
}

/// Default cap on generated tokens per request.
pub const DEFAULT_MAX_TOKENS: u32 = 512;

/// A request as the engine sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimRequest {
    pub request_id: u64,
    pub prompt_tokens: u32,
    pub target_output_tokens: u32,
    pub seed: u64,
}

impl SimRequest {
    pub fn new(request_id: u64, prompt_tokens: u32, target_output_tokens: u32) -> Self {
        Self { request_id, prompt_tokens, target_output_tokens, seed: request_id }
    }

    /// KV tokens held once the request has generated everything.
    pub fn kv_budget(&self) -> u64 {
        u64::from(self.prompt_tokens) + u64::from(self.target_output_tokens)
    }
}

const WORDS: [&str; 16] = [
    " the", " model", " serves", " tokens", " quickly", " and", " a", " gateway", " routes", " each", " request",
    " to", " one", " replica", " under", " load",
];

/// Deterministic synthetic token text for `(seed, seq)`.
pub fn token_text(seed: u64, seq: u32) -> &'static str {
    // splitmix64 finaliser
    let mut z = seed.wrapping_add(u64::from(seq).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    WORDS[(z % WORDS.len() as u64) as usize]
}
