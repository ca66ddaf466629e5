//! Closed-loop load against a cluster of simulated replicas, entirely in
//! virtual time.
//!
//! Every replica is a [`BatchScheduler`]. A step is computed when it starts
//! and its events are delivered at its end instant; simultaneous step ends
//! are delivered in replica order, so a run is a pure function of its
//! inputs. A completion immediately issues the next request, keeping
//! exactly `concurrency` requests in flight until the workload runs out.

use std::collections::HashMap;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::engine::scheduler::{SchedEvent, StepOutcome};
use crate::engine::{BatchScheduler, ReplicaConfig, SimRequest, DEFAULT_MAX_TOKENS};
use crate::metrics::{aggregate, MetricError, MetricsSummary, RequestStatus, RequestTimeline, RunWindow};
use crate::router::{Outcome, Registry, ReplicaHandle, RouterError, RoutingPolicy};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Routing(#[from] RouterError),
    #[error(transparent)]
    Metrics(#[from] MetricError),
    #[error("concurrency must be positive")]
    ZeroConcurrency,
    #[error("simulation stalled with {0} requests unfinished")]
    Stalled(usize),
}

/// Lengths of synthetic requests, drawn uniformly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub prompt_tokens: RangeInclusive<u32>,
    pub output_tokens: RangeInclusive<u32>,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self { prompt_tokens: 32..=384, output_tokens: 32..=DEFAULT_MAX_TOKENS, seed: 7 }
    }
}

impl WorkloadSpec {
    /// `total` requests with ids `0..total`.
    pub fn generate(&self, total: usize) -> Vec<SimRequest> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..total as u64)
            .map(|id| SimRequest {
                request_id: id,
                prompt_tokens: rng.random_range(self.prompt_tokens.clone()),
                target_output_tokens: rng.random_range(self.output_tokens.clone()),
                seed: rng.random(),
            })
            .collect()
    }
}

/// One routing decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub request_id: u64,
    pub replica_id: String,
    /// Requests in flight at routing time, including this one.
    pub concurrency: usize,
    pub at: Timestamp,
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub concurrency: usize,
    pub timelines: Vec<RequestTimeline>,
    pub routes: Vec<RouteRecord>,
    pub summary: MetricsSummary,
    /// Largest number of requests in flight at any instant.
    pub peak_inflight: usize,
}

#[derive(Debug, Clone, Default)]
struct Progress {
    submitted: Timestamp,
    started: Option<Timestamp>,
    first_token: Option<Timestamp>,
    finished: Option<Timestamp>,
    tokens: u64,
    rejected: bool,
}

struct Node {
    sched: BatchScheduler,
    pending: Option<StepOutcome>,
}

/// Runs `requests` through the cluster with `concurrency` requests in
/// flight, routing each with `policy`.
pub fn simulate_closed_loop(
    replicas: &[ReplicaConfig],
    policy: &RoutingPolicy,
    requests: &[SimRequest],
    concurrency: usize,
) -> Result<SimRun, SimError> {
    if concurrency == 0 {
        return Err(SimError::ZeroConcurrency);
    }
    let registry = Registry::new(
        replicas.iter().map(|c| ReplicaHandle::new(c.clone(), format!("sim://{}", c.replica_id))).collect(),
    )
    .without_log();
    registry.check_policy(policy)?;
    let index: HashMap<&str, usize> = replicas.iter().enumerate().map(|(i, c)| (c.replica_id.as_str(), i)).collect();
    let mut nodes: Vec<Node> = replicas.iter().map(|c| Node { sched: BatchScheduler::new(c), pending: None }).collect();

    let slot_of: HashMap<u64, usize> = requests.iter().enumerate().map(|(i, r)| (r.request_id, i)).collect();
    let mut progress = vec![Progress::default(); requests.len()];
    let mut owner = vec![usize::MAX; requests.len()];
    let mut routes = Vec::with_capacity(requests.len());
    let mut now = Timestamp::ZERO;
    let mut next = 0usize;
    let mut inflight = 0usize;
    let mut peak_inflight = 0usize;

    let mut issue = |now: Timestamp,
                     inflight: &mut usize,
                     nodes: &mut [Node],
                     progress: &mut [Progress],
                     owner: &mut [usize],
                     routes: &mut Vec<RouteRecord>|
     -> Result<(), SimError> {
        while *inflight < concurrency && next < requests.len() {
            let req = &requests[next];
            let slot = next;
            next += 1;
            *inflight += 1;
            peak_inflight = peak_inflight.max(*inflight);
            progress[slot].submitted = now;
            let chosen = registry.select_replica(policy, *inflight)?;
            let node = index[chosen.replica_id.as_str()];
            routes.push(RouteRecord {
                request_id: req.request_id,
                replica_id: chosen.replica_id.clone(),
                concurrency: *inflight,
                at: now,
            });
            owner[slot] = node;
            nodes[node].sched.advance_to(now);
            if nodes[node].sched.submit(req.clone(), now).is_err() {
                progress[slot].rejected = true;
                progress[slot].finished = Some(now);
                registry.report_outcome(&chosen.replica_id, Outcome::Failure)?;
                *inflight -= 1;
            }
        }
        Ok(())
    };

    issue(now, &mut inflight, &mut nodes, &mut progress, &mut owner, &mut routes)?;
    loop {
        for node in nodes.iter_mut() {
            if node.pending.is_none() && node.sched.has_work() {
                node.sched.advance_to(now);
                let outcome = node.sched.step();
                if outcome.end > outcome.start {
                    node.pending = Some(outcome);
                } else {
                    apply(&outcome, &slot_of, &mut progress);
                }
            }
        }
        let Some(end) = nodes.iter().filter_map(|n| n.pending.as_ref().map(|o| o.end)).min() else {
            if inflight > 0 {
                return Err(SimError::Stalled(inflight));
            }
            break;
        };
        now = end;
        for node_idx in 0..nodes.len() {
            if nodes[node_idx].pending.as_ref().is_some_and(|o| o.end == now) {
                let outcome = nodes[node_idx].pending.take().expect("checked");
                for id in apply(&outcome, &slot_of, &mut progress) {
                    debug_assert_eq!(owner[slot_of[&id]], node_idx);
                    registry.report_outcome(&replicas[node_idx].replica_id, Outcome::Success)?;
                    inflight -= 1;
                }
            }
        }
        issue(now, &mut inflight, &mut nodes, &mut progress, &mut owner, &mut routes)?;
    }

    let timelines: Vec<RequestTimeline> =
        requests.iter().zip(&progress).map(|(req, p)| timeline(req.request_id, p)).collect();
    let total_tokens = progress.iter().map(|p| p.tokens).sum();
    let end = progress.iter().filter_map(|p| p.finished).max().unwrap_or(Timestamp::ZERO);
    let window = RunWindow::new(Timestamp::ZERO, end, total_tokens)?;
    let summary = aggregate(&timelines, &window)?;
    Ok(SimRun { concurrency, timelines, routes, summary, peak_inflight })
}

/// Applies one step's events; returns the ids that finished.
fn apply(outcome: &StepOutcome, slot_of: &HashMap<u64, usize>, progress: &mut [Progress]) -> Vec<u64> {
    let mut finished = Vec::new();
    for ev in &outcome.events {
        match *ev {
            SchedEvent::Started { request_id, at } => progress[slot_of[&request_id]].started = Some(at),
            SchedEvent::Token { request_id, at, .. } => {
                let p = &mut progress[slot_of[&request_id]];
                p.first_token.get_or_insert(at);
                p.tokens += 1;
            }
            SchedEvent::Finished { request_id, timing, .. } => {
                progress[slot_of[&request_id]].finished = Some(timing.finished);
                finished.push(request_id);
            }
            SchedEvent::Resumed { .. } | SchedEvent::Paused { .. } => {}
        }
    }
    finished
}

fn timeline(id: u64, p: &Progress) -> RequestTimeline {
    match (p.rejected, p.started, p.first_token, p.finished) {
        (false, Some(t2), Some(t3), Some(t6)) => {
            let t0 = p.submitted;
            RequestTimeline::completed(id.to_string(), [t0, t0, t2, t3, t3, t3, t6], p.tokens)
        }
        _ => {
            let mut tl = RequestTimeline::submitted(id.to_string(), p.submitted);
            tl.status = RequestStatus::Failed;
            tl.n_generated = p.tokens;
            tl
        }
    }
}
