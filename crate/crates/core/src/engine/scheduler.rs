//! Continuous-batching scheduler with a token-granular KV budget.
//!
//! Each [`BatchScheduler::step`] admits work into the running batch, pauses
//! requests if the KV budget would overflow, runs one decode iteration and
//! emits one token per running request. The scheduler owns a virtual clock;
//! nothing here sleeps.

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LatencyModel, ReplicaConfig, SimRequest};
use crate::clock::Timestamp;

/// How KV capacity is reserved for running requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvPolicy {
    /// Reserve prompt + full target output at admission. Running requests
    /// never outgrow their reservation, so nothing is ever paused.
    #[default]
    ReserveFull,
    /// Reserve only what is held (prompt + generated so far) and grow by one
    /// token per iteration. When the batch would overflow, the most recently
    /// admitted request is paused and its KV released.
    Grow,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("waiting queue is full ({0} requests)")]
    Overloaded(usize),
    #[error("request {request_id} needs {budget} KV tokens, capacity is {capacity}")]
    ExceedsCapacity { request_id: u64, budget: u64, capacity: u64 },
    #[error("request must generate at least one token")]
    EmptyTarget,
    #[error("request {0} is already known to this engine")]
    Duplicate(u64),
}

/// Engine-side instants of one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineTiming {
    pub received: Timestamp,
    pub started: Timestamp,
    pub first_token: Timestamp,
    pub finished: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedEvent {
    Started { request_id: u64, at: Timestamp },
    Resumed { request_id: u64, at: Timestamp },
    Paused { request_id: u64, at: Timestamp },
    Token { request_id: u64, seq: u32, at: Timestamp },
    Finished { request_id: u64, total_tokens: u32, timing: EngineTiming },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StepOutcome {
    pub start: Timestamp,
    pub end: Timestamp,
    pub events: Vec<SchedEvent>,
}

impl StepOutcome {
    pub fn is_idle(&self) -> bool {
        self.events.is_empty() && self.start == self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EngineStats {
    pub inflight: usize,
    pub batch_size: usize,
    pub waiting: usize,
    pub paused: usize,
    pub kv_used_tokens: u64,
    pub completed: u64,
}

#[derive(Debug, Clone)]
struct Entry {
    req: SimRequest,
    generated: u32,
    kv_held: u64,
    received: Timestamp,
    started: Option<Timestamp>,
    first_token: Option<Timestamp>,
}

impl Entry {
    fn footprint(&self) -> u64 {
        u64::from(self.req.prompt_tokens) + u64::from(self.generated)
    }
}

/// Replica-side batch state: running batch (in admission order), FIFO wait
/// queue, LIFO stack of paused requests and the KV occupancy.
#[derive(Debug, Clone)]
pub struct BatchScheduler {
    latency: LatencyModel,
    max_batch: usize,
    max_waiting: usize,
    kv_capacity: u64,
    policy: KvPolicy,
    running: Vec<Entry>,
    waiting: VecDeque<Entry>,
    paused: Vec<Entry>,
    kv_used: u64,
    clock: Timestamp,
    completed: u64,
}

impl BatchScheduler {
    pub fn new(config: &ReplicaConfig) -> Self {
        Self {
            latency: config.latency,
            max_batch: config.max_batch.max(1),
            max_waiting: config.max_waiting,
            kv_capacity: config.kv_capacity_tokens,
            policy: config.kv_policy,
            running: Vec::new(),
            waiting: VecDeque::new(),
            paused: Vec::new(),
            kv_used: 0,
            clock: Timestamp::ZERO,
            completed: 0,
        }
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    /// Moves the clock forward to `t` (never backward).
    pub fn advance_to(&mut self, t: Timestamp) {
        self.clock = self.clock.max(t);
    }

    pub fn kv_capacity(&self) -> u64 {
        self.kv_capacity
    }

    pub fn kv_used(&self) -> u64 {
        self.kv_used
    }

    pub fn has_work(&self) -> bool {
        !(self.running.is_empty() && self.waiting.is_empty() && self.paused.is_empty())
    }

    fn contains(&self, id: u64) -> bool {
        self.running.iter().chain(self.waiting.iter()).chain(self.paused.iter()).any(|e| e.req.request_id == id)
    }

    /// Queues a request that arrived at `at`.
    pub fn submit(&mut self, req: SimRequest, at: Timestamp) -> Result<(), SubmitError> {
        if req.target_output_tokens == 0 {
            return Err(SubmitError::EmptyTarget);
        }
        if req.kv_budget() > self.kv_capacity {
            return Err(SubmitError::ExceedsCapacity {
                request_id: req.request_id,
                budget: req.kv_budget(),
                capacity: self.kv_capacity,
            });
        }
        if self.waiting.len() >= self.max_waiting {
            return Err(SubmitError::Overloaded(self.waiting.len()));
        }
        if self.contains(req.request_id) {
            return Err(SubmitError::Duplicate(req.request_id));
        }
        self.waiting.push_back(Entry { req, generated: 0, kv_held: 0, received: at, started: None, first_token: None });
        Ok(())
    }

    /// Drops a request wherever it is, releasing its KV. Returns whether it
    /// was found.
    pub fn cancel(&mut self, id: u64) -> bool {
        if let Some(i) = self.running.iter().position(|e| e.req.request_id == id) {
            let e = self.running.remove(i);
            self.kv_used -= e.kv_held;
            return true;
        }
        if let Some(i) = self.waiting.iter().position(|e| e.req.request_id == id) {
            self.waiting.remove(i);
            return true;
        }
        if let Some(i) = self.paused.iter().position(|e| e.req.request_id == id) {
            self.paused.remove(i);
            return true;
        }
        false
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            inflight: self.running.len() + self.waiting.len() + self.paused.len(),
            batch_size: self.running.len(),
            waiting: self.waiting.len(),
            paused: self.paused.len(),
            kv_used_tokens: self.kv_used,
            completed: self.completed,
        }
    }

    /// KV tokens `e` must hold to join the batch.
    fn admission_need(&self, e: &Entry) -> u64 {
        match self.policy {
            KvPolicy::ReserveFull => e.req.kv_budget(),
            KvPolicy::Grow => e.footprint(),
        }
    }

    fn fits(&self, e: &Entry) -> bool {
        let need = self.admission_need(e);
        match self.policy {
            KvPolicy::ReserveFull => self.kv_used + need <= self.kv_capacity,
            // Leave room for every running request's next token, including
            // the one being admitted.
            KvPolicy::Grow => self.kv_used + need + (self.running.len() as u64) < self.kv_capacity,
        }
    }

    /// Runs one scheduling step: admit, pause if needed, one decode
    /// iteration. An empty scheduler returns an idle outcome and leaves the
    /// clock untouched.
    pub fn step(&mut self) -> StepOutcome {
        let start = self.clock;
        let mut events = Vec::new();
        let mut prefill = Duration::ZERO;

        // Admission: paused requests first (most recently paused on top),
        // then the wait queue in arrival order. Stops at the first request
        // that does not fit so neither queue is reordered.
        while self.running.len() < self.max_batch {
            let from_paused = !self.paused.is_empty();
            let candidate = if from_paused { self.paused.last() } else { self.waiting.front() };
            let Some(candidate) = candidate else { break };
            if !self.fits(candidate) {
                break;
            }
            let mut e = if from_paused { self.paused.pop() } else { self.waiting.pop_front() }.expect("peeked");
            e.kv_held = self.admission_need(&e);
            self.kv_used += e.kv_held;
            let id = e.req.request_id;
            if e.started.is_none() {
                e.started = Some(start);
                prefill += self.latency.prefill(e.req.prompt_tokens);
                events.push(SchedEvent::Started { request_id: id, at: start });
            } else {
                events.push(SchedEvent::Resumed { request_id: id, at: start });
            }
            self.running.push(e);
        }

        if self.policy == KvPolicy::Grow {
            while !self.running.is_empty() && self.kv_used + self.running.len() as u64 > self.kv_capacity {
                let mut victim = self.running.pop().expect("nonempty");
                self.kv_used -= victim.kv_held;
                victim.kv_held = 0;
                events.push(SchedEvent::Paused { request_id: victim.req.request_id, at: start });
                self.paused.push(victim);
            }
        }

        if self.running.is_empty() {
            return StepOutcome { start, end: start, events };
        }

        let end = start + (prefill + self.latency.decode(self.running.len()));
        let mut i = 0;
        while i < self.running.len() {
            let e = &mut self.running[i];
            let seq = e.generated;
            e.generated += 1;
            if self.policy == KvPolicy::Grow {
                e.kv_held += 1;
                self.kv_used += 1;
            }
            if e.first_token.is_none() {
                e.first_token = Some(end);
            }
            events.push(SchedEvent::Token { request_id: e.req.request_id, seq, at: end });
            if e.generated >= e.req.target_output_tokens {
                let e = self.running.remove(i);
                self.kv_used -= e.kv_held;
                self.completed += 1;
                events.push(SchedEvent::Finished {
                    request_id: e.req.request_id,
                    total_tokens: e.generated,
                    timing: EngineTiming {
                        received: e.received,
                        started: e.started.expect("admitted"),
                        first_token: e.first_token.expect("emitted"),
                        finished: end,
                    },
                });
            } else {
                i += 1;
            }
        }
        self.clock = end;
        StepOutcome { start, end, events }
    }

    /// Steps until no work remains, returning every outcome. Intended for
    /// tests and offline runs; panics after `max_steps`.
    pub fn drain(&mut self, max_steps: usize) -> Vec<StepOutcome> {
        let mut out = Vec::new();
        while self.has_work() {
            assert!(out.len() < max_steps, "scheduler did not drain within {max_steps} steps");
            out.push(self.step());
        }
        out
    }
}
