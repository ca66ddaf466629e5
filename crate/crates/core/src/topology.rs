//! Declarative replica topology, shared by the engine and gateway binaries.
//!
//! ```toml
//! [policy]
//! kind = "dynamic_threshold"
//! threshold = 64
//! low_pool = ["tp8-0"]
//! high_pool = ["tp2-0", "tp2-1"]
//!
//! [[replicas]]
//! id = "tp8-0"
//! address = "127.0.0.1:7100"
//! tp = 8
//! kv_capacity = 524288
//! max_batch = 64
//! decode_base_ms = 8.0
//! decode_per_slot_ms = 0.3
//! ```
//!
//! Latency coefficients left out fall back to the shipped calibration for
//! the replica's tensor-parallel degree.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration;
use crate::engine::{KvPolicy, LatencyMillis, LatencyModel, ReplicaConfig};
use crate::router::{ReplicaHandle, RoutingPolicy};

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing topology: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

fn default_one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaEntry {
    pub id: String,
    pub address: String,
    #[serde(default = "default_one")]
    pub tp: u32,
    #[serde(default = "default_one")]
    pub ep: u32,
    /// Defaults to `tp * ep`.
    #[serde(default)]
    pub gpus: Option<u32>,
    #[serde(default)]
    pub kv_capacity: Option<u64>,
    #[serde(default)]
    pub max_batch: Option<usize>,
    #[serde(default)]
    pub max_waiting: Option<usize>,
    #[serde(default)]
    pub kv_policy: KvPolicy,
    #[serde(default)]
    pub pool_cap: Option<usize>,
    #[serde(default)]
    pub prefill_base_ms: Option<f64>,
    #[serde(default)]
    pub prefill_per_token_ms: Option<f64>,
    #[serde(default)]
    pub decode_base_ms: Option<f64>,
    #[serde(default)]
    pub decode_per_slot_ms: Option<f64>,
}

impl ReplicaEntry {
    /// An entry with every optional field unset.
    pub fn new(id: impl Into<String>, address: impl Into<String>, tp: u32) -> Self {
        Self {
            id: id.into(),
            address: address.into(),
            tp,
            ep: 1,
            gpus: None,
            kv_capacity: None,
            max_batch: None,
            max_waiting: None,
            kv_policy: KvPolicy::default(),
            pool_cap: None,
            prefill_base_ms: None,
            prefill_per_token_ms: None,
            decode_base_ms: None,
            decode_per_slot_ms: None,
        }
    }

    /// Overrides all four latency coefficients.
    pub fn with_latency_ms(
        mut self,
        prefill_base: f64,
        prefill_per_token: f64,
        decode_base: f64,
        decode_per_slot: f64,
    ) -> Self {
        self.prefill_base_ms = Some(prefill_base);
        self.prefill_per_token_ms = Some(prefill_per_token);
        self.decode_base_ms = Some(decode_base);
        self.decode_per_slot_ms = Some(decode_per_slot);
        self
    }

    pub fn latency(&self) -> Result<LatencyModel, TopologyError> {
        let base: LatencyMillis = calibration::preset(self.tp).map(Into::into).unwrap_or(LatencyMillis {
            prefill_base_ms: f64::NAN,
            prefill_per_token_ms: f64::NAN,
            decode_base_ms: f64::NAN,
            decode_per_slot_ms: f64::NAN,
        });
        let m = LatencyMillis {
            prefill_base_ms: self.prefill_base_ms.unwrap_or(base.prefill_base_ms),
            prefill_per_token_ms: self.prefill_per_token_ms.unwrap_or(base.prefill_per_token_ms),
            decode_base_ms: self.decode_base_ms.unwrap_or(base.decode_base_ms),
            decode_per_slot_ms: self.decode_per_slot_ms.unwrap_or(base.decode_per_slot_ms),
        };
        for (name, v) in [
            ("prefill_base_ms", m.prefill_base_ms),
            ("prefill_per_token_ms", m.prefill_per_token_ms),
            ("decode_base_ms", m.decode_base_ms),
            ("decode_per_slot_ms", m.decode_per_slot_ms),
        ] {
            if v.is_nan() {
                return Err(TopologyError::Invalid(format!(
                    "replica {}: {name} is required (no calibration for TP{})",
                    self.id, self.tp
                )));
            }
            if v < 0.0 || !v.is_finite() {
                return Err(TopologyError::Invalid(format!(
                    "replica {}: {name} must be a non-negative number",
                    self.id
                )));
            }
        }
        Ok(m.into())
    }

    pub fn replica_config(&self) -> Result<ReplicaConfig, TopologyError> {
        let mut c = ReplicaConfig::new(self.id.clone(), self.tp, self.ep, self.latency()?);
        c.gpu_count = self.gpus.unwrap_or(self.tp * self.ep);
        c.kv_capacity_tokens = self.kv_capacity.unwrap_or_else(|| calibration::kv_capacity(c.gpu_count));
        c.max_batch = self.max_batch.unwrap_or(calibration::MAX_BATCH);
        if let Some(w) = self.max_waiting {
            c.max_waiting = w;
        }
        c.kv_policy = self.kv_policy;
        c.validate().map_err(|e| TopologyError::Invalid(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default = "default_policy")]
    pub policy: RoutingPolicy,
    pub replicas: Vec<ReplicaEntry>,
}

fn default_policy() -> RoutingPolicy {
    RoutingPolicy::LeastInflight
}

impl Topology {
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let t: Topology = toml::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TopologyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| TopologyError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.replicas.is_empty() {
            return Err(TopologyError::Invalid("topology lists no replicas".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.replicas {
            if !seen.insert(r.id.as_str()) {
                return Err(TopologyError::Invalid(format!("duplicate replica id {}", r.id)));
            }
            r.replica_config()?;
        }
        self.policy
            .validate(self.replicas.iter().map(|r| r.id.as_str()))
            .map_err(|e| TopologyError::Invalid(e.to_string()))
    }

    pub fn replica_configs(&self) -> Result<Vec<ReplicaConfig>, TopologyError> {
        self.replicas.iter().map(ReplicaEntry::replica_config).collect()
    }

    pub fn handles(&self) -> Result<Vec<ReplicaHandle>, TopologyError> {
        self.replicas.iter().map(|r| Ok(ReplicaHandle::new(r.replica_config()?, r.address.clone()))).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ReplicaEntry> {
        self.replicas.iter().find(|r| r.id == id)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("topology serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[policy]
kind = "dynamic_threshold"
low_pool = ["tp8-0"]
high_pool = ["tp2-0", "tp2-1"]

[[replicas]]
id = "tp8-0"
address = "127.0.0.1:7100"
tp = 8

[[replicas]]
id = "tp2-0"
address = "127.0.0.1:7101"
tp = 2
decode_base_ms = 1.5

[[replicas]]
id = "tp2-1"
address = "127.0.0.1:7102"
tp = 2
ep = 2
kv_capacity = 1000
max_batch = 4
kv_policy = "grow"
"#;

    #[test]
    fn parses_sample() {
        let t = Topology::parse(SAMPLE).unwrap();
        assert_eq!(t.policy, RoutingPolicy::dynamic(&["tp8-0"], &["tp2-0", "tp2-1"]));
        let cfgs = t.replica_configs().unwrap();
        assert_eq!(cfgs[0].latency, calibration::preset(8).unwrap());
        assert_eq!(cfgs[1].latency.decode_base_ns, 1_500_000);
        assert_eq!(cfgs[1].latency.decode_per_slot_ns, calibration::preset(2).unwrap().decode_per_slot_ns);
        assert_eq!(cfgs[2].gpu_count, 4);
        assert_eq!(cfgs[2].shape_label(), "EP2-TP2");
        assert_eq!((cfgs[2].kv_capacity_tokens, cfgs[2].max_batch), (1000, 4));
        assert_eq!(cfgs[2].kv_policy, KvPolicy::Grow);
    }

    #[test]
    fn round_trips() {
        let t = Topology::parse(SAMPLE).unwrap();
        assert_eq!(Topology::parse(&t.to_toml()).unwrap(), t);
    }

    #[test]
    fn rejects_bad_topologies() {
        let dup = "[[replicas]]\nid='a'\naddress='x'\n[[replicas]]\nid='a'\naddress='y'\n";
        assert!(matches!(Topology::parse(dup), Err(TopologyError::Invalid(_))));
        let uncalibrated = "[[replicas]]\nid='a'\naddress='x'\ntp=3\n";
        assert!(Topology::parse(uncalibrated).unwrap_err().to_string().contains("required"));
        let negative = "[[replicas]]\nid='a'\naddress='x'\ntp=2\ndecode_base_ms=-1.0\n";
        assert!(Topology::parse(negative).is_err());
        let unknown_pool = "[policy]\nkind='dynamic_threshold'\nlow_pool=['a']\nhigh_pool=['b']\n[[replicas]]\nid='a'\naddress='x'\ntp=2\n";
        assert!(Topology::parse(unknown_pool).is_err());
        let typo = "[[replicas]]\nid='a'\naddress='x'\ntp=2\nmax_bach=3\n";
        assert!(matches!(Topology::parse(typo), Err(TopologyError::Parse(_))));
        assert!(Topology::parse("replicas = []").is_err());
    }

    #[test]
    fn defaults_to_least_inflight() {
        let t = Topology::parse("[[replicas]]\nid='a'\naddress='x'\ntp=8\n").unwrap();
        assert_eq!(t.policy, RoutingPolicy::LeastInflight);
    }
}
