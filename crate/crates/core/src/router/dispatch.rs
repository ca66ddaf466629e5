//! Dispatch with failover: pick a replica, send SUBMIT over a pooled
//! channel, and retry elsewhere if the replica fails before its first token.

use std::sync::Arc;
use std::time::Duration;

use futures::{Sink, SinkExt, Stream, StreamExt};
use thiserror::Error;
use tracing::{debug, warn};

use super::pool::{ConnectionPool, Connector, PoolError, PooledConn};
use super::{Outcome, Registry, RouterError, RoutingPolicy};
use crate::clock::Timestamp;
use crate::protocol::{code, DoneFrame, Frame, ProtocolError, SubmitFrame};

/// Anything that carries frames both ways.
pub trait FrameTransport:
    Sink<Frame, Error = ProtocolError> + Stream<Item = Result<Frame, ProtocolError>> + Unpin + Send
{
}

impl<T> FrameTransport for T where
    T: Sink<Frame, Error = ProtocolError> + Stream<Item = Result<Frame, ProtocolError>> + Unpin + Send
{
}

#[derive(Debug, Clone)]
pub struct FailoverConfig {
    pub max_attempts: usize,
    /// Bound on the wait for an engine's first frame; `None` waits as long
    /// as the engine queues the request.
    pub first_frame_timeout: Option<Duration>,
}

impl Default for FailoverConfig {
    fn default() -> Self {
        Self { max_attempts: 3, first_frame_timeout: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error(transparent)]
    Routing(#[from] RouterError),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error("replica {replica_id} failed after {tokens} tokens: {reason}")]
    MidStream { replica_id: String, tokens: u32, reason: String },
}

/// The request as sent to an engine.
pub type DispatchRequest = SubmitFrame;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineChunk {
    Token { seq: u32, text: String },
    Done(DoneFrame),
}

pub struct Dispatcher<C: Connector> {
    registry: Arc<Registry>,
    pool: Arc<ConnectionPool<C>>,
    config: FailoverConfig,
}

impl<C: Connector> Clone for Dispatcher<C> {
    fn clone(&self) -> Self {
        Self { registry: self.registry.clone(), pool: self.pool.clone(), config: self.config.clone() }
    }
}

enum Attempt {
    /// The replica is at fault; counts toward taking it out of rotation.
    Failed(String),
    /// The replica is fine but cannot take this request now.
    Declined(String),
}

impl<C> Dispatcher<C>
where
    C: Connector,
    C::Conn: FrameTransport,
{
    pub fn new(registry: Arc<Registry>, pool: Arc<ConnectionPool<C>>, config: FailoverConfig) -> Self {
        Self { registry, pool, config }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn pool(&self) -> &Arc<ConnectionPool<C>> {
        &self.pool
    }

    /// Routes `req` and returns the token stream of the first replica that
    /// produces a response. Replicas already tried are not tried again.
    pub async fn route_with_failover(
        &self,
        req: &DispatchRequest,
        policy: &RoutingPolicy,
        concurrency: usize,
    ) -> Result<EngineStream<C::Conn>, DispatchError> {
        let max_attempts = self.config.max_attempts.max(1);
        let mut tried: Vec<String> = Vec::new();
        let mut last = String::new();
        while tried.len() < max_attempts {
            let selected = match self.registry.select_excluding(policy, concurrency, &tried) {
                Ok(s) => s,
                Err(e) if tried.is_empty() => return Err(e.into()),
                Err(_) => break,
            };
            let dispatched_at = Timestamp::now();
            let id = selected.replica_id.clone();
            tried.push(id.clone());
            match self.attempt(req, &id, &selected.address).await {
                Ok((conn, first)) => {
                    return Ok(EngineStream {
                        conn: Some(conn),
                        registry: self.registry.clone(),
                        replica_id: id,
                        request_id: req.request_id,
                        attempts: tried.len(),
                        dispatched_at,
                        first_frame_at: Timestamp::now(),
                        pending: Some(first),
                        next_seq: 0,
                        tokens: 0,
                        finished: false,
                    });
                }
                Err(Attempt::Failed(reason)) => {
                    warn!(replica = %id, %reason, "dispatch failed");
                    self.pool.purge(&id);
                    let _ = self.registry.report_outcome(&id, Outcome::Failure);
                    last = reason;
                }
                Err(Attempt::Declined(reason)) => {
                    debug!(replica = %id, %reason, "replica declined request");
                    let _ = self.registry.release(&id);
                    last = reason;
                }
            }
        }
        Err(DispatchError::Exhausted { attempts: tried.len(), last })
    }

    async fn attempt(
        &self,
        req: &DispatchRequest,
        id: &str,
        address: &str,
    ) -> Result<(PooledConn<C::Conn>, Frame), Attempt> {
        let mut conn = match self.pool.acquire(id, address).await {
            Ok(c) => c,
            Err(e @ PoolError::Exhausted { .. }) => return Err(Attempt::Declined(e.to_string())),
            Err(e) => return Err(Attempt::Failed(e.to_string())),
        };
        if let Err(e) = conn.send(Frame::Submit(req.clone())).await {
            conn.poison();
            return Err(Attempt::Failed(format!("send: {e}")));
        }
        let first = match self.config.first_frame_timeout {
            Some(t) => match tokio::time::timeout(t, conn.next()).await {
                Ok(f) => f,
                Err(_) => {
                    conn.poison();
                    return Err(Attempt::Failed("no response before timeout".into()));
                }
            },
            None => conn.next().await,
        };
        match first {
            Some(Ok(Frame::Error { code, message, .. })) => {
                conn.release();
                if code == code::OVERLOADED || code == code::BUSY {
                    Err(Attempt::Declined(message))
                } else {
                    Err(Attempt::Failed(format!("engine error {code}: {message}")))
                }
            }
            Some(Ok(frame @ (Frame::Token { .. } | Frame::Done(_)))) => Ok((conn, frame)),
            Some(Ok(other)) => {
                conn.poison();
                Err(Attempt::Failed(format!("unexpected frame kind {}", other.kind())))
            }
            Some(Err(e)) => {
                conn.poison();
                Err(Attempt::Failed(e.to_string()))
            }
            None => {
                conn.poison();
                Err(Attempt::Failed("connection closed before first token".into()))
            }
        }
    }
}

/// Token stream of one dispatched request. Dropping it before the end
/// closes the channel, which tells the engine to stop generating.
pub struct EngineStream<T> {
    conn: Option<PooledConn<T>>,
    registry: Arc<Registry>,
    replica_id: String,
    request_id: u64,
    attempts: usize,
    dispatched_at: Timestamp,
    first_frame_at: Timestamp,
    pending: Option<Frame>,
    next_seq: u32,
    tokens: u32,
    finished: bool,
}

impl<T: FrameTransport> EngineStream<T> {
    pub fn replica_id(&self) -> &str {
        &self.replica_id
    }

    /// Attempts used, including the successful one.
    pub fn attempts(&self) -> usize {
        self.attempts
    }

    /// When SUBMIT was sent to the replica that answered.
    pub fn dispatched_at(&self) -> Timestamp {
        self.dispatched_at
    }

    /// When that replica's first frame arrived.
    pub fn first_frame_at(&self) -> Timestamp {
        self.first_frame_at
    }

    pub fn tokens_received(&self) -> u32 {
        self.tokens
    }

    fn fail(&mut self, reason: String) -> DispatchError {
        if let Some(mut conn) = self.conn.take() {
            conn.poison();
        }
        self.finished = true;
        let _ = self.registry.report_outcome(&self.replica_id, Outcome::Failure);
        DispatchError::MidStream { replica_id: self.replica_id.clone(), tokens: self.tokens, reason }
    }

    /// Next token or the final DONE; `None` once the stream has ended.
    pub async fn next(&mut self) -> Option<Result<EngineChunk, DispatchError>> {
        if self.finished {
            return None;
        }
        let frame = match self.pending.take() {
            Some(f) => Ok(f),
            None => match self.conn.as_mut()?.next().await {
                Some(f) => f,
                None => return Some(Err(self.fail("connection closed".into()))),
            },
        };
        let frame = match frame {
            Ok(f) => f,
            Err(e) => return Some(Err(self.fail(e.to_string()))),
        };
        match frame {
            Frame::Token { request_id, seq, text } if request_id == self.request_id => {
                if seq != self.next_seq {
                    return Some(Err(self.fail(format!("expected seq {}, got {seq}", self.next_seq))));
                }
                self.next_seq += 1;
                self.tokens += 1;
                Some(Ok(EngineChunk::Token { seq, text }))
            }
            Frame::Done(done) if done.request_id == self.request_id => {
                self.finished = true;
                if let Some(conn) = self.conn.take() {
                    conn.release();
                }
                let _ = self.registry.report_outcome(&self.replica_id, Outcome::Success);
                Some(Ok(EngineChunk::Done(done)))
            }
            Frame::Error { code, message, .. } => Some(Err(self.fail(format!("engine error {code}: {message}")))),
            other => Some(Err(self.fail(format!("unexpected frame kind {}", other.kind())))),
        }
    }
}

impl<T> Drop for EngineStream<T> {
    fn drop(&mut self) {
        if !self.finished {
            if let Some(mut conn) = self.conn.take() {
                conn.poison();
            }
            let _ = self.registry.release(&self.replica_id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ClockMode, EngineServer, FaultPlan, LatencyModel, ReplicaConfig};
    use crate::router::{ReplicaHandle, TcpConnector};

    fn cfg(id: &str) -> ReplicaConfig {
        ReplicaConfig::new(id, 1, 1, LatencyModel::from_millis(0.2, 0.0, 0.5, 0.0)).with_capacity(100_000, 8)
    }

    fn request(id: u64, max_tokens: u32) -> DispatchRequest {
        SubmitFrame {
            request_id: id,
            prompt_tokens: 4,
            max_tokens,
            temperature: 1.0,
            top_p: 1.0,
            seed: id,
            prompt: String::new(),
        }
    }

    async fn cluster(ids: &[&str]) -> (Vec<EngineServer>, Dispatcher<TcpConnector>) {
        let mut servers = Vec::new();
        for id in ids {
            servers.push(EngineServer::start("127.0.0.1:0".parse().unwrap(), cfg(id), ClockMode::Wall).await.unwrap());
        }
        let registry = Arc::new(Registry::new(
            servers.iter().map(|s| ReplicaHandle::new(cfg(s.replica_id()), s.addr().to_string())).collect(),
        ));
        let pool = Arc::new(ConnectionPool::new(TcpConnector::default(), 8));
        (servers, Dispatcher::new(registry, pool, FailoverConfig { max_attempts: 2, ..Default::default() }))
    }

    async fn collect(stream: &mut EngineStream<impl FrameTransport>) -> Result<(Vec<u32>, DoneFrame), DispatchError> {
        let mut seqs = Vec::new();
        while let Some(chunk) = stream.next().await {
            match chunk? {
                EngineChunk::Token { seq, .. } => seqs.push(seq),
                EngineChunk::Done(d) => return Ok((seqs, d)),
            }
        }
        unreachable!("stream ended without DONE")
    }

    #[tokio::test]
    async fn streams_and_reuses_channel() {
        let (servers, d) = cluster(&["a"]).await;
        for i in 0..5 {
            let mut s = d.route_with_failover(&request(i, 4), &RoutingPolicy::LeastInflight, 1).await.unwrap();
            let (seqs, done) = collect(&mut s).await.unwrap();
            assert_eq!(seqs, vec![0, 1, 2, 3]);
            assert_eq!(done.total_tokens, 4);
        }
        assert_eq!(servers[0].accepted_connections(), 1);
        assert_eq!(d.registry().total_inflight(), 0);
    }

    #[tokio::test]
    async fn fails_over_to_second_replica() {
        let (servers, d) = cluster(&["a", "b"]).await;
        servers[0].kill().await;
        let mut s = d.route_with_failover(&request(1, 3), &RoutingPolicy::RoundRobin, 1).await.unwrap();
        assert_eq!(s.replica_id(), "b");
        assert_eq!(s.attempts(), 2);
        collect(&mut s).await.unwrap();
        let snap = d.registry().snapshot();
        assert_eq!(snap[0].consecutive_failures, 1);
        assert_eq!(d.registry().total_inflight(), 0);
    }

    #[tokio::test]
    async fn all_replicas_down_exhausts_attempts() {
        let (servers, d) = cluster(&["a", "b"]).await;
        for s in &servers {
            s.kill().await;
        }
        let err = d.route_with_failover(&request(1, 3), &RoutingPolicy::RoundRobin, 1).await.err().unwrap();
        assert!(matches!(err, DispatchError::Exhausted { attempts: 2, .. }));
    }

    #[tokio::test]
    async fn rejected_submit_is_retried() {
        let (servers, d) = cluster(&["a", "b"]).await;
        servers[0].set_fault(FaultPlan { reject_submits: true, ..Default::default() });
        let mut s = d.route_with_failover(&request(1, 2), &RoutingPolicy::RoundRobin, 1).await.unwrap();
        assert_eq!(s.replica_id(), "b");
        collect(&mut s).await.unwrap();
    }

    #[tokio::test]
    async fn mid_stream_failure_is_not_retried() {
        let (servers, d) = cluster(&["a", "b"]).await;
        servers[0].set_fault(FaultPlan { drop_after_tokens: Some(10), ..Default::default() });
        let mut s = d.route_with_failover(&request(1, 20), &RoutingPolicy::RoundRobin, 1).await.unwrap();
        assert_eq!(s.replica_id(), "a");
        let err = collect(&mut s).await.unwrap_err();
        assert_eq!(
            err,
            DispatchError::MidStream { replica_id: "a".into(), tokens: 10, reason: "connection closed".into() }
        );
        assert!(s.next().await.is_none());
        assert_eq!(d.registry().total_inflight(), 0);
    }

    #[tokio::test]
    async fn dropping_stream_releases_inflight() {
        let (_servers, d) = cluster(&["a"]).await;
        let mut s = d.route_with_failover(&request(1, 50), &RoutingPolicy::RoundRobin, 1).await.unwrap();
        s.next().await.unwrap().unwrap();
        assert_eq!(d.registry().total_inflight(), 1);
        drop(s);
        assert_eq!(d.registry().total_inflight(), 0);
        assert_eq!(d.pool().open_connections("a"), 0);
        assert_eq!(d.registry().snapshot()[0].consecutive_failures, 0);
    }
}
