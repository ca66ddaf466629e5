//! Shared replica registry: health, inflight counts and the routing log.
//!
//! Selection and the inflight increment happen under one lock, so two
//! concurrent selections can never both act on the same stale minimum.

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::policy::{ReplicaView, RoutingPolicy};
use super::RouterError;
use crate::clock::Timestamp;
use crate::engine::ReplicaConfig;

/// Consecutive failures before a replica is taken out of rotation.
pub const DEFAULT_FAILURE_LIMIT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

/// One entry of the routing log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RoutingEvent {
    Dispatched { replica_id: String, concurrency: usize, at: Timestamp },
    MarkedUnhealthy { replica_id: String, at: Timestamp },
    MarkedHealthy { replica_id: String, at: Timestamp },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaSnapshot {
    pub replica_id: String,
    pub address: String,
    pub healthy: bool,
    pub inflight: usize,
    pub consecutive_failures: u32,
}

/// A replica known to the router.
#[derive(Debug, Clone)]
pub struct ReplicaHandle {
    pub replica_id: String,
    pub config: ReplicaConfig,
    pub address: String,
    pub healthy: bool,
    pub inflight: usize,
    consecutive_failures: u32,
    unhealthy_since: Option<Timestamp>,
}

impl ReplicaHandle {
    pub fn new(config: ReplicaConfig, address: impl Into<String>) -> Self {
        Self {
            replica_id: config.replica_id.clone(),
            config,
            address: address.into(),
            healthy: true,
            inflight: 0,
            consecutive_failures: 0,
            unhealthy_since: None,
        }
    }

    pub fn consecutive_failures(&self) -> u32 {
        self.consecutive_failures
    }

    pub fn unhealthy_since(&self) -> Option<Timestamp> {
        self.unhealthy_since
    }
}

/// The replica chosen for one dispatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selected {
    pub replica_id: String,
    pub address: String,
}

struct State {
    replicas: Vec<ReplicaHandle>,
    cursor: usize,
    log: Vec<RoutingEvent>,
}

pub struct Registry {
    state: Mutex<State>,
    failure_limit: u32,
    record_log: bool,
}

impl Registry {
    pub fn new(mut replicas: Vec<ReplicaHandle>) -> Self {
        replicas.sort_by(|a, b| a.replica_id.cmp(&b.replica_id));
        Self {
            state: Mutex::new(State { replicas, cursor: 0, log: Vec::new() }),
            failure_limit: DEFAULT_FAILURE_LIMIT,
            record_log: true,
        }
    }

    pub fn with_failure_limit(mut self, limit: u32) -> Self {
        self.failure_limit = limit.max(1);
        self
    }

    /// Disables the in-memory routing log (it grows with every dispatch).
    pub fn without_log(mut self) -> Self {
        self.record_log = false;
        self
    }

    pub fn ids(&self) -> Vec<String> {
        self.state.lock().replicas.iter().map(|r| r.replica_id.clone()).collect()
    }

    pub fn check_policy(&self, policy: &RoutingPolicy) -> Result<(), RouterError> {
        let st = self.state.lock();
        policy.validate(st.replicas.iter().map(|r| r.replica_id.as_str()))
    }

    /// Picks a replica and reserves a slot on it (inflight + 1).
    pub fn select_replica(&self, policy: &RoutingPolicy, concurrency: usize) -> Result<Selected, RouterError> {
        self.select_excluding(policy, concurrency, &[])
    }

    pub fn select_excluding(
        &self,
        policy: &RoutingPolicy,
        concurrency: usize,
        excluded: &[String],
    ) -> Result<Selected, RouterError> {
        let mut guard = self.state.lock();
        let st = &mut *guard;
        let views: Vec<ReplicaView<'_>> = st
            .replicas
            .iter()
            .map(|r| ReplicaView { id: &r.replica_id, healthy: r.healthy, inflight: r.inflight })
            .collect();
        let idx = policy.choose(&views, concurrency, &mut st.cursor, excluded).ok_or(RouterError::NoHealthyReplica)?;
        drop(views);
        let r = &mut st.replicas[idx];
        r.inflight += 1;
        let selected = Selected { replica_id: r.replica_id.clone(), address: r.address.clone() };
        if self.record_log {
            st.log.push(RoutingEvent::Dispatched {
                replica_id: selected.replica_id.clone(),
                concurrency,
                at: Timestamp::now(),
            });
        }
        Ok(selected)
    }

    fn with_replica<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut ReplicaHandle, &mut Vec<RoutingEvent>, bool) -> T,
    ) -> Result<T, RouterError> {
        let mut guard = self.state.lock();
        let st = &mut *guard;
        let r = st
            .replicas
            .iter_mut()
            .find(|r| r.replica_id == id)
            .ok_or_else(|| RouterError::UnknownReplica(id.to_string()))?;
        Ok(f(r, &mut st.log, self.record_log))
    }

    /// Ends a dispatch on `id`. Failures count toward taking the replica out
    /// of rotation; a success resets the count.
    pub fn report_outcome(&self, id: &str, outcome: Outcome) -> Result<(), RouterError> {
        let limit = self.failure_limit;
        self.with_replica(id, |r, log, record| {
            r.inflight = r.inflight.saturating_sub(1);
            match outcome {
                Outcome::Success => r.consecutive_failures = 0,
                Outcome::Failure => {
                    r.consecutive_failures += 1;
                    if r.healthy && r.consecutive_failures >= limit {
                        let at = Timestamp::now();
                        r.healthy = false;
                        r.unhealthy_since = Some(at);
                        if record {
                            log.push(RoutingEvent::MarkedUnhealthy { replica_id: r.replica_id.clone(), at });
                        }
                    }
                }
            }
        })
    }

    /// Ends a dispatch without judging the replica (e.g. the client went
    /// away).
    pub fn release(&self, id: &str) -> Result<(), RouterError> {
        self.with_replica(id, |r, _, _| r.inflight = r.inflight.saturating_sub(1))
    }

    pub fn mark_healthy(&self, id: &str) -> Result<(), RouterError> {
        self.with_replica(id, |r, log, record| {
            r.consecutive_failures = 0;
            if !r.healthy {
                r.healthy = true;
                r.unhealthy_since = None;
                if record {
                    log.push(RoutingEvent::MarkedHealthy { replica_id: r.replica_id.clone(), at: Timestamp::now() });
                }
            }
        })
    }

    pub fn mark_unhealthy(&self, id: &str) -> Result<(), RouterError> {
        self.with_replica(id, |r, log, record| {
            if r.healthy {
                let at = Timestamp::now();
                r.healthy = false;
                r.unhealthy_since = Some(at);
                if record {
                    log.push(RoutingEvent::MarkedUnhealthy { replica_id: r.replica_id.clone(), at });
                }
            }
        })
    }

    /// `(id, address)` of every replica currently out of rotation.
    pub fn unhealthy(&self) -> Vec<(String, String)> {
        self.state
            .lock()
            .replicas
            .iter()
            .filter(|r| !r.healthy)
            .map(|r| (r.replica_id.clone(), r.address.clone()))
            .collect()
    }

    pub fn snapshot(&self) -> Vec<ReplicaSnapshot> {
        self.state
            .lock()
            .replicas
            .iter()
            .map(|r| ReplicaSnapshot {
                replica_id: r.replica_id.clone(),
                address: r.address.clone(),
                healthy: r.healthy,
                inflight: r.inflight,
                consecutive_failures: r.consecutive_failures,
            })
            .collect()
    }

    pub fn total_inflight(&self) -> usize {
        self.state.lock().replicas.iter().map(|r| r.inflight).sum()
    }

    pub fn routing_log(&self) -> Vec<RoutingEvent> {
        self.state.lock().log.clone()
    }
}

/// Checks a routing log for dispatches to a replica while it was out of
/// rotation. Returns the offending entries.
pub fn dispatches_while_unhealthy(log: &[RoutingEvent]) -> Vec<RoutingEvent> {
    let mut down: std::collections::HashSet<&str> = std::collections::HashSet::new();
    let mut bad = Vec::new();
    for ev in log {
        match ev {
            RoutingEvent::MarkedUnhealthy { replica_id, .. } => {
                down.insert(replica_id);
            }
            RoutingEvent::MarkedHealthy { replica_id, .. } => {
                down.remove(replica_id.as_str());
            }
            RoutingEvent::Dispatched { replica_id, .. } => {
                if down.contains(replica_id.as_str()) {
                    bad.push(ev.clone());
                }
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::LatencyModel;
    use proptest::prelude::*;

    fn registry(ids: &[&str]) -> Registry {
        Registry::new(
            ids.iter()
                .map(|id| ReplicaHandle::new(ReplicaConfig::new(*id, 1, 1, LatencyModel::default()), format!("{id}:0")))
                .collect(),
        )
    }

    fn failures(reg: &Registry, id: &str) -> u32 {
        reg.snapshot().into_iter().find(|s| s.replica_id == id).unwrap().consecutive_failures
    }

    #[test]
    fn three_failures_take_replica_out() {
        let reg = registry(&["a", "b"]);
        for _ in 0..3 {
            let s = reg.select_excluding(&RoutingPolicy::LeastInflight, 1, &["b".into()]).unwrap();
            assert_eq!(s.replica_id, "a");
            reg.report_outcome("a", Outcome::Failure).unwrap();
        }
        assert_eq!(reg.unhealthy(), vec![("a".to_string(), "a:0".to_string())]);
        for _ in 0..5 {
            assert_eq!(reg.select_replica(&RoutingPolicy::RoundRobin, 1).unwrap().replica_id, "b");
        }
        assert!(dispatches_while_unhealthy(&reg.routing_log()).is_empty());
    }

    #[test]
    fn success_resets_failure_count() {
        let reg = registry(&["a"]);
        for outcome in [Outcome::Failure, Outcome::Failure] {
            reg.select_replica(&RoutingPolicy::LeastInflight, 1).unwrap();
            reg.report_outcome("a", outcome).unwrap();
        }
        assert_eq!(failures(&reg, "a"), 2);
        reg.select_replica(&RoutingPolicy::LeastInflight, 1).unwrap();
        reg.report_outcome("a", Outcome::Success).unwrap();
        assert_eq!(failures(&reg, "a"), 0);
        assert!(reg.unhealthy().is_empty());
    }

    #[test]
    fn failure_on_unhealthy_only_counts() {
        let reg = registry(&["a"]);
        reg.mark_unhealthy("a").unwrap();
        let before = reg.routing_log().len();
        reg.report_outcome("a", Outcome::Failure).unwrap();
        assert_eq!(failures(&reg, "a"), 1);
        assert_eq!(reg.routing_log().len(), before);
        assert!(!reg.snapshot()[0].healthy);
    }

    #[test]
    fn unknown_replica() {
        let reg = registry(&["a"]);
        assert_eq!(reg.report_outcome("zz", Outcome::Success), Err(RouterError::UnknownReplica("zz".into())));
    }

    #[test]
    fn no_healthy_replica() {
        let reg = registry(&["a"]);
        reg.mark_unhealthy("a").unwrap();
        assert_eq!(reg.select_replica(&RoutingPolicy::RoundRobin, 1), Err(RouterError::NoHealthyReplica));
        reg.mark_healthy("a").unwrap();
        assert!(reg.select_replica(&RoutingPolicy::RoundRobin, 1).is_ok());
    }

    #[test]
    fn concurrent_selection_spreads_load() {
        let reg = std::sync::Arc::new(registry(&["a", "b", "c", "d"]));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let reg = reg.clone();
                std::thread::spawn(move || {
                    for _ in 0..100 {
                        reg.select_replica(&RoutingPolicy::LeastInflight, 1).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        // Serialized least-inflight selection keeps counts within one.
        let counts: Vec<usize> = reg.snapshot().iter().map(|s| s.inflight).collect();
        assert_eq!(counts, vec![200, 200, 200, 200]);
    }

    proptest! {
        #[test]
        fn round_robin_is_fair(n in 1usize..8, k in 1usize..20) {
            let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
            let reg = registry(&ids.iter().map(String::as_str).collect::<Vec<_>>());
            let mut counts = std::collections::HashMap::new();
            for _ in 0..k * n {
                let s = reg.select_replica(&RoutingPolicy::RoundRobin, 1).unwrap();
                *counts.entry(s.replica_id).or_insert(0) += 1;
            }
            prop_assert!(counts.values().all(|&c| c == k));
            prop_assert_eq!(counts.len(), n);
        }

        #[test]
        fn inflight_is_conserved(ops in prop::collection::vec((any::<bool>(), 0usize..200), 1..300)) {
            let reg = registry(&["a", "b", "c"]).with_failure_limit(u32::MAX);
            let mut open: Vec<String> = Vec::new();
            for (dispatch, pick) in ops {
                if dispatch || open.is_empty() {
                    open.push(reg.select_replica(&RoutingPolicy::LeastInflight, open.len() + 1).unwrap().replica_id);
                } else {
                    let id = open.swap_remove(pick % open.len());
                    let outcome = if pick % 2 == 0 { Outcome::Success } else { Outcome::Failure };
                    reg.report_outcome(&id, outcome).unwrap();
                }
                prop_assert_eq!(reg.total_inflight(), open.len());
            }
        }

        #[test]
        fn dynamic_routing_respects_threshold(concurrencies in prop::collection::vec(1usize..200, 1..100)) {
            let reg = registry(&["tp2-a", "tp2-b", "tp8"]);
            let policy = RoutingPolicy::dynamic(&["tp8"], &["tp2-a", "tp2-b"]);
            for c in concurrencies {
                let s = reg.select_replica(&policy, c).unwrap();
                if c < 64 {
                    prop_assert_eq!(s.replica_id.as_str(), "tp8");
                } else {
                    prop_assert!(s.replica_id.starts_with("tp2"));
                }
            }
        }
    }
}
