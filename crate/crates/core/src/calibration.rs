//! Shipped latency calibrations for the three 8-GPU layouts.
//!
//! Coefficients are fitted to ordinal behaviour, not to absolute H100
//! numbers: a wider tensor-parallel group has a cheaper iteration at small
//! batch, and a narrower one has a flatter per-slot slope, so many TP2
//! replicas win once each of them holds a sizeable batch. See
//! `docs/calibration.md` for the arithmetic.

use crate::engine::{LatencyModel, ReplicaConfig};
use crate::router::RoutingPolicy;

/// Requests one replica batches together.
pub const MAX_BATCH: usize = 64;

/// Latency model of a replica with tensor-parallel degree `tp`, if shipped.
pub fn preset(tp: u32) -> Option<LatencyModel> {
    match tp {
        8 => Some(LatencyModel::from_millis(2.0, 0.004, 8.0, 0.30)),
        4 => Some(LatencyModel::from_millis(3.0, 0.006, 10.0, 0.38)),
        2 => Some(LatencyModel::from_millis(4.0, 0.010, 12.0, 0.36)),
        _ => None,
    }
}

/// KV capacity in tokens; proportional to the GPUs of the replica.
pub fn kv_capacity(gpus: u32) -> u64 {
    u64::from(gpus) * 65_536
}

/// `replicas` identical replicas of tensor-parallel degree `tp`, named
/// `{prefix}-{i}`.
pub fn replicas(prefix: &str, count: usize, tp: u32) -> Vec<ReplicaConfig> {
    let latency = preset(tp).unwrap_or_else(|| panic!("no calibration for TP{tp}"));
    (0..count)
        .map(|i| ReplicaConfig::new(format!("{prefix}-{i}"), tp, 1, latency).with_capacity(kv_capacity(tp), MAX_BATCH))
        .collect()
}

/// The three static layouts of one 8-GPU node, as `(label, replicas)`.
pub fn static_layouts() -> Vec<(&'static str, Vec<ReplicaConfig>)> {
    vec![("1xTP8", replicas("tp8", 1, 8)), ("2xTP4", replicas("tp4", 2, 4)), ("4xTP2", replicas("tp2", 4, 2))]
}

/// The threshold policy's deployment: the 1xTP8 layout serves light load
/// and the 4xTP2 layout heavy load, side by side.
pub fn dynamic_layout() -> (Vec<ReplicaConfig>, RoutingPolicy) {
    let low = replicas("tp8", 1, 8);
    let high = replicas("tp2", 4, 2);
    let ids = |v: &[ReplicaConfig]| v.iter().map(|c| c.replica_id.clone()).collect::<Vec<_>>();
    let (low_ids, high_ids) = (ids(&low), ids(&high));
    let policy = RoutingPolicy::dynamic(
        &low_ids.iter().map(String::as_str).collect::<Vec<_>>(),
        &high_ids.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    (low.into_iter().chain(high).collect(), policy)
}

/// Uniformly scales every coefficient, e.g. to compress a 60 s deadline
/// into 0.6 s.
pub fn scaled(model: LatencyModel, factor: f64) -> LatencyModel {
    let s = |ns: u64| (ns as f64 * factor).round() as u64;
    LatencyModel {
        prefill_base_ns: s(model.prefill_base_ns),
        prefill_per_token_ns: s(model.prefill_per_token_ns),
        decode_base_ns: s(model.decode_base_ns),
        decode_per_slot_ns: s(model.decode_per_slot_ns),
    }
}
