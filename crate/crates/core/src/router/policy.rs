use serde::{Deserialize, Serialize};

use super::RouterError;

/// Concurrency at which the dynamic policy switches pools.
pub const DEFAULT_THRESHOLD: usize = 64;

fn default_threshold() -> usize {
    DEFAULT_THRESHOLD
}

/// How a replica is picked for each request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingPolicy {
    RoundRobin,
    LeastInflight,
    /// Below `threshold` concurrent requests route to `low_pool` (few
    /// replicas, high tensor parallelism); at or above it route to
    /// `high_pool` (many replicas, low tensor parallelism). Least-inflight
    /// within the chosen pool.
    DynamicThreshold {
        #[serde(default = "default_threshold")]
        threshold: usize,
        low_pool: Vec<String>,
        high_pool: Vec<String>,
    },
}

/// What a policy may look at for one replica.
#[derive(Debug, Clone, Copy)]
pub struct ReplicaView<'a> {
    pub id: &'a str,
    pub healthy: bool,
    pub inflight: usize,
}

impl RoutingPolicy {
    pub fn dynamic(low_pool: &[&str], high_pool: &[&str]) -> Self {
        RoutingPolicy::DynamicThreshold {
            threshold: DEFAULT_THRESHOLD,
            low_pool: low_pool.iter().map(|s| s.to_string()).collect(),
            high_pool: high_pool.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RoutingPolicy::RoundRobin => "round_robin",
            RoutingPolicy::LeastInflight => "least_inflight",
            RoutingPolicy::DynamicThreshold { .. } => "dynamic_threshold",
        }
    }

    /// Checks the policy against the replica ids it will route over.
    pub fn validate<'a>(&self, known: impl IntoIterator<Item = &'a str> + Clone) -> Result<(), RouterError> {
        let RoutingPolicy::DynamicThreshold { threshold, low_pool, high_pool } = self else {
            return Ok(());
        };
        if *threshold == 0 {
            return Err(RouterError::InvalidPolicy("threshold must be positive".into()));
        }
        if low_pool.is_empty() || high_pool.is_empty() {
            return Err(RouterError::InvalidPolicy("both pools must be nonempty".into()));
        }
        if let Some(shared) = low_pool.iter().find(|id| high_pool.contains(id)) {
            return Err(RouterError::InvalidPolicy(format!("replica {shared} is in both pools")));
        }
        for id in low_pool.iter().chain(high_pool) {
            if !known.clone().into_iter().any(|k| k == id) {
                return Err(RouterError::UnknownReplica(id.clone()));
            }
        }
        Ok(())
    }

    /// Which pool the dynamic policy uses at `concurrency`; `None` for the
    /// other policies.
    pub fn pool_for(&self, concurrency: usize) -> Option<&[String]> {
        match self {
            RoutingPolicy::DynamicThreshold { threshold, low_pool, high_pool } => {
                Some(if concurrency < *threshold { low_pool } else { high_pool })
            }
            _ => None,
        }
    }

    /// Picks an index into `replicas`, which must be sorted by id.
    /// `cursor` is the round-robin position; `excluded` replicas are
    /// skipped. Returns `None` when no eligible healthy replica exists.
    pub fn choose(
        &self,
        replicas: &[ReplicaView<'_>],
        concurrency: usize,
        cursor: &mut usize,
        excluded: &[String],
    ) -> Option<usize> {
        let eligible = |r: &ReplicaView<'_>| r.healthy && !excluded.iter().any(|e| e == r.id);
        match self {
            RoutingPolicy::RoundRobin => {
                let n = replicas.len();
                let found = (0..n).map(|k| (*cursor + k) % n).find(|&i| eligible(&replicas[i]))?;
                *cursor = (found + 1) % n;
                Some(found)
            }
            RoutingPolicy::LeastInflight => least_inflight(replicas, |r| eligible(r)),
            RoutingPolicy::DynamicThreshold { .. } => {
                let pool = self.pool_for(concurrency).expect("dynamic policy");
                least_inflight(replicas, |r| eligible(r) && pool.iter().any(|p| p == r.id))
            }
        }
    }
}

fn least_inflight(replicas: &[ReplicaView<'_>], eligible: impl Fn(&ReplicaView<'_>) -> bool) -> Option<usize> {
    replicas
        .iter()
        .enumerate()
        .filter(|(_, r)| eligible(r))
        .min_by(|(_, a), (_, b)| a.inflight.cmp(&b.inflight).then_with(|| a.id.cmp(b.id)))
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn views<'a>(spec: &[(&'a str, bool, usize)]) -> Vec<ReplicaView<'a>> {
        spec.iter().map(|&(id, healthy, inflight)| ReplicaView { id, healthy, inflight }).collect()
    }

    #[test]
    fn least_inflight_breaks_ties_by_id() {
        let r = views(&[("A", true, 3), ("B", true, 1), ("C", true, 1)]);
        let idx = RoutingPolicy::LeastInflight.choose(&r, 0, &mut 0, &[]).unwrap();
        assert_eq!(r[idx].id, "B");
    }

    #[test]
    fn dynamic_threshold_boundary() {
        let p = RoutingPolicy::dynamic(&["tp8"], &["tp2-a", "tp2-b"]);
        let mut r = views(&[("tp2-a", true, 0), ("tp2-b", true, 0), ("tp8", true, 0)]);
        r.sort_by_key(|v| v.id);
        let pick = |c| r[p.choose(&r, c, &mut 0, &[]).unwrap()].id;
        assert_eq!(pick(32), "tp8");
        assert_eq!(pick(63), "tp8");
        assert_eq!(pick(64), "tp2-a");
        assert_eq!(pick(500), "tp2-a");
    }

    #[test]
    fn dynamic_pool_without_healthy_replica() {
        let p = RoutingPolicy::dynamic(&["tp8"], &["tp2"]);
        let r = views(&[("tp2", true, 0), ("tp8", false, 0)]);
        assert_eq!(p.choose(&r, 1, &mut 0, &[]), None);
    }

    #[test]
    fn round_robin_skips_unhealthy_and_excluded() {
        let r = views(&[("a", true, 0), ("b", false, 0), ("c", true, 0)]);
        let mut cursor = 0;
        let picks: Vec<&str> =
            (0..4).map(|_| r[RoutingPolicy::RoundRobin.choose(&r, 0, &mut cursor, &[]).unwrap()].id).collect();
        assert_eq!(picks, ["a", "c", "a", "c"]);
        let excl = vec!["a".to_string()];
        assert_eq!(r[RoutingPolicy::RoundRobin.choose(&r, 0, &mut 0, &excl).unwrap()].id, "c");
    }

    #[test]
    fn validation() {
        let ids = ["a", "b", "c"];
        assert!(RoutingPolicy::dynamic(&["a"], &["b", "c"]).validate(ids).is_ok());
        assert!(RoutingPolicy::dynamic(&["a"], &["a"]).validate(ids).is_err());
        assert!(RoutingPolicy::dynamic(&[], &["a"]).validate(ids).is_err());
        assert!(matches!(RoutingPolicy::dynamic(&["a"], &["z"]).validate(ids), Err(RouterError::UnknownReplica(_))));
    }

    #[test]
    fn policy_parses_from_toml() {
        let p: RoutingPolicy = toml::from_str(
            r#"
            kind = "dynamic_threshold"
            low_pool = ["a"]
            high_pool = ["b"]
            "#,
        )
        .unwrap();
        assert_eq!(p, RoutingPolicy::dynamic(&["a"], &["b"]));
    }
}
