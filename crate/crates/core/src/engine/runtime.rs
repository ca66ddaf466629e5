//! The replica loop: one task owns the scheduler and talks to the rest of
//! the process through channels.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use super::scheduler::{BatchScheduler, EngineStats, EngineTiming, SchedEvent, StepOutcome, SubmitError};
use super::{token_text, ReplicaConfig, SimRequest};
use crate::clock::Timestamp;

/// How the replica loop relates virtual time to real time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Sleep for each iteration's modelled duration. Timestamps are on the
    /// process clock.
    #[default]
    Wall,
    /// Advance a logical clock starting at zero without sleeping.
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamItem {
    Token { seq: u32, text: &'static str, at: Timestamp },
    Done { total_tokens: u32, timing: EngineTiming },
}

pub type TokenStream = mpsc::UnboundedReceiver<StreamItem>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Rejected(#[from] SubmitError),
    #[error("engine loop has stopped")]
    Stopped,
}

enum Command {
    Submit {
        batch: Vec<(SimRequest, Option<Timestamp>)>,
        reply: oneshot::Sender<Vec<Result<TokenStream, SubmitError>>>,
    },
    Cancel(u64),
    Stats(oneshot::Sender<EngineStats>),
}

/// Cloneable handle to a running replica loop.
#[derive(Clone)]
pub struct EngineHandle {
    tx: mpsc::UnboundedSender<Command>,
    config: Arc<ReplicaConfig>,
    mode: ClockMode,
    log: Option<Arc<Mutex<Vec<SchedEvent>>>>,
    task: Arc<JoinHandle<()>>,
}

impl EngineHandle {
    pub fn spawn(config: ReplicaConfig, mode: ClockMode) -> Self {
        Self::spawn_inner(config, mode, None)
    }

    /// Like [`spawn`](Self::spawn) but records every scheduler event.
    pub fn spawn_logged(config: ReplicaConfig, mode: ClockMode) -> Self {
        Self::spawn_inner(config, mode, Some(Arc::default()))
    }

    fn spawn_inner(config: ReplicaConfig, mode: ClockMode, log: Option<Arc<Mutex<Vec<SchedEvent>>>>) -> Self {
        let (tx, rx) = mpsc::unbounded_channel();
        let mut sched = BatchScheduler::new(&config);
        if mode == ClockMode::Wall {
            sched.advance_to(Timestamp::now());
        }
        let task = tokio::spawn(run(sched, rx, mode, log.clone()));
        Self { tx, config: Arc::new(config), mode, log, task: Arc::new(task) }
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.config
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub async fn submit(&self, req: SimRequest) -> Result<TokenStream, EngineError> {
        self.submit_received(req, None).await
    }

    /// Submits with an explicit receipt instant (wall mode only; virtual
    /// mode stamps receipt with its own clock).
    pub async fn submit_received(
        &self,
        req: SimRequest,
        received: Option<Timestamp>,
    ) -> Result<TokenStream, EngineError> {
        let mut out = self.submit_many(vec![(req, received)]).await?;
        Ok(out.pop().expect("one result per request")?)
    }

    /// Submits several requests atomically with respect to the loop: no
    /// scheduler step runs between them.
    pub async fn submit_many(
        &self,
        batch: Vec<(SimRequest, Option<Timestamp>)>,
    ) -> Result<Vec<Result<TokenStream, SubmitError>>, EngineError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Command::Submit { batch, reply }).map_err(|_| EngineError::Stopped)?;
        rx.await.map_err(|_| EngineError::Stopped)
    }

    pub fn cancel(&self, request_id: u64) {
        let _ = self.tx.send(Command::Cancel(request_id));
    }

    pub async fn stats(&self) -> Result<EngineStats, EngineError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Command::Stats(reply)).map_err(|_| EngineError::Stopped)?;
        rx.await.map_err(|_| EngineError::Stopped)
    }

    /// Scheduler events recorded so far (empty unless spawned logged).
    pub fn event_log(&self) -> Vec<SchedEvent> {
        self.log.as_ref().map(|l| l.lock().clone()).unwrap_or_default()
    }

    /// Stops the loop; open token streams end without a `Done`.
    pub fn shutdown(&self) {
        self.task.abort();
    }
}

struct Loop {
    sched: BatchScheduler,
    mode: ClockMode,
    streams: HashMap<u64, mpsc::UnboundedSender<StreamItem>>,
    seeds: HashMap<u64, u64>,
    log: Option<Arc<Mutex<Vec<SchedEvent>>>>,
}

impl Loop {
    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Submit { batch, reply } => {
                let results = batch
                    .into_iter()
                    .map(|(req, received)| {
                        let at = match self.mode {
                            ClockMode::Wall => received.unwrap_or_else(Timestamp::now),
                            ClockMode::Virtual => self.sched.clock(),
                        };
                        let (id, seed) = (req.request_id, req.seed);
                        self.sched.submit(req, at)?;
                        let (tx, rx) = mpsc::unbounded_channel();
                        self.streams.insert(id, tx);
                        self.seeds.insert(id, seed);
                        Ok(rx)
                    })
                    .collect();
                let _ = reply.send(results);
            }
            Command::Cancel(id) => {
                self.sched.cancel(id);
                self.streams.remove(&id);
                self.seeds.remove(&id);
            }
            Command::Stats(reply) => {
                let _ = reply.send(self.sched.stats());
            }
        }
    }

    fn deliver(&mut self, outcome: StepOutcome) {
        for event in &outcome.events {
            match *event {
                SchedEvent::Token { request_id, seq, at } => {
                    let seed = self.seeds.get(&request_id).copied().unwrap_or(request_id);
                    let item = StreamItem::Token { seq, text: token_text(seed, seq), at };
                    let gone = match self.streams.get(&request_id) {
                        Some(tx) => tx.send(item).is_err(),
                        None => true,
                    };
                    if gone {
                        // Receiver dropped: nobody is listening any more.
                        self.sched.cancel(request_id);
                        self.streams.remove(&request_id);
                        self.seeds.remove(&request_id);
                    }
                }
                SchedEvent::Finished { request_id, total_tokens, timing } => {
                    if let Some(tx) = self.streams.remove(&request_id) {
                        let _ = tx.send(StreamItem::Done { total_tokens, timing });
                    }
                    self.seeds.remove(&request_id);
                }
                _ => {}
            }
        }
        if let Some(log) = &self.log {
            log.lock().extend(outcome.events);
        }
    }
}

async fn run(
    sched: BatchScheduler,
    mut rx: mpsc::UnboundedReceiver<Command>,
    mode: ClockMode,
    log: Option<Arc<Mutex<Vec<SchedEvent>>>>,
) {
    let mut lp = Loop { sched, mode, streams: HashMap::new(), seeds: HashMap::new(), log };
    loop {
        if !lp.sched.has_work() {
            match rx.recv().await {
                Some(cmd) => lp.handle(cmd),
                None => return,
            }
        }
        while let Ok(cmd) = rx.try_recv() {
            lp.handle(cmd);
        }
        if !lp.sched.has_work() {
            continue;
        }
        if mode == ClockMode::Wall {
            lp.sched.advance_to(Timestamp::now());
        }
        let outcome = lp.sched.step();
        if outcome.is_idle() {
            // Nothing admissible until something changes.
            match rx.recv().await {
                Some(cmd) => lp.handle(cmd),
                None => return,
            }
            continue;
        }
        match mode {
            ClockMode::Wall => tokio::time::sleep_until(outcome.end.to_instant().into()).await,
            ClockMode::Virtual => tokio::task::yield_now().await,
        }
        lp.deliver(outcome);
    }
}
