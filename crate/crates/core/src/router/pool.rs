//! Per-replica pool of persistent engine connections.
//!
//! A channel carries one request at a time. The per-replica cap is enforced
//! with a semaphore: a caller holds a permit for as long as it holds a
//! channel, and a new connection is only opened while holding one.

use std::collections::HashMap;
use std::future::Future;
use std::io;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::sync::{OwnedSemaphorePermit, Semaphore};
use tokio_util::codec::Framed;

use crate::clock::Timestamp;
use crate::protocol::FrameCodec;

/// Default per-replica cap for a replica batching `max_batch` requests.
pub fn default_pool_cap(max_batch: usize) -> usize {
    max_batch.max(8)
}

/// Opens connections to a replica address.
pub trait Connector: Send + Sync + 'static {
    type Conn: Send + 'static;

    fn connect(&self, address: &str) -> impl Future<Output = io::Result<Self::Conn>> + Send;
}

/// Opens framed TCP connections.
#[derive(Debug, Clone)]
pub struct TcpConnector {
    pub connect_timeout: Duration,
}

impl Default for TcpConnector {
    fn default() -> Self {
        Self { connect_timeout: Duration::from_secs(2) }
    }
}

impl Connector for TcpConnector {
    type Conn = Framed<TcpStream, FrameCodec>;

    async fn connect(&self, address: &str) -> io::Result<Self::Conn> {
        let stream = tokio::time::timeout(self.connect_timeout, TcpStream::connect(address))
            .await
            .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "connect timed out"))??;
        stream.set_nodelay(true)?;
        Ok(Framed::new(stream, FrameCodec::new()))
    }
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("all {cap} channels to {replica_id} are busy")]
    Exhausted { replica_id: String, cap: usize },
    #[error("connecting to {replica_id} failed: {source}")]
    Connect { replica_id: String, source: io::Error },
}

struct Idle<T> {
    conn: T,
    created_at: Timestamp,
}

struct Slot<T> {
    replica_id: String,
    cap: usize,
    permits: Arc<Semaphore>,
    idle: Mutex<Vec<Idle<T>>>,
    open: AtomicUsize,
    opened_total: AtomicU64,
    generation: AtomicU64,
}

impl<T> Slot<T> {
    fn close_one(&self) {
        self.open.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct ConnectionPool<C: Connector> {
    connector: C,
    default_cap: usize,
    caps: HashMap<String, usize>,
    acquire_timeout: Duration,
    slots: Mutex<HashMap<String, Arc<Slot<C::Conn>>>>,
}

impl<C: Connector> ConnectionPool<C> {
    pub fn new(connector: C, default_cap: usize) -> Self {
        Self {
            connector,
            default_cap: default_cap.max(1),
            caps: HashMap::new(),
            acquire_timeout: Duration::from_secs(5),
            slots: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_cap(mut self, replica_id: impl Into<String>, cap: usize) -> Self {
        self.caps.insert(replica_id.into(), cap.max(1));
        self
    }

    /// How long [`acquire`](Self::acquire) waits for a busy pool.
    pub fn with_acquire_timeout(mut self, timeout: Duration) -> Self {
        self.acquire_timeout = timeout;
        self
    }

    pub fn connector(&self) -> &C {
        &self.connector
    }

    pub fn cap(&self, replica_id: &str) -> usize {
        self.caps.get(replica_id).copied().unwrap_or(self.default_cap)
    }

    fn slot(&self, replica_id: &str) -> Arc<Slot<C::Conn>> {
        let mut slots = self.slots.lock();
        slots
            .entry(replica_id.to_string())
            .or_insert_with(|| {
                let cap = self.cap(replica_id);
                Arc::new(Slot {
                    replica_id: replica_id.to_string(),
                    cap,
                    permits: Arc::new(Semaphore::new(cap)),
                    idle: Mutex::new(Vec::new()),
                    open: AtomicUsize::new(0),
                    opened_total: AtomicU64::new(0),
                    generation: AtomicU64::new(0),
                })
            })
            .clone()
    }

    /// Returns an idle channel to the replica or opens a new one, waiting up
    /// to the acquire timeout when every channel is busy.
    pub async fn acquire(&self, replica_id: &str, address: &str) -> Result<PooledConn<C::Conn>, PoolError> {
        let slot = self.slot(replica_id);
        let permit = match tokio::time::timeout(self.acquire_timeout, slot.permits.clone().acquire_owned()).await {
            Ok(Ok(p)) => p,
            _ => return Err(PoolError::Exhausted { replica_id: replica_id.to_string(), cap: slot.cap }),
        };
        let generation = slot.generation.load(Ordering::SeqCst);
        let reused = slot.idle.lock().pop();
        let (conn, created_at, reused) = match reused {
            Some(idle) => (idle.conn, idle.created_at, true),
            None => {
                let conn = self
                    .connector
                    .connect(address)
                    .await
                    .map_err(|source| PoolError::Connect { replica_id: replica_id.to_string(), source })?;
                slot.open.fetch_add(1, Ordering::SeqCst);
                slot.opened_total.fetch_add(1, Ordering::SeqCst);
                (conn, Timestamp::now(), false)
            }
        };
        Ok(PooledConn { conn: Some(conn), slot, permit: Some(permit), generation, created_at, reused, poisoned: false })
    }

    /// Closes every idle channel to the replica; busy ones close on release.
    pub fn purge(&self, replica_id: &str) {
        let Some(slot) = self.slots.lock().get(replica_id).cloned() else { return };
        slot.generation.fetch_add(1, Ordering::SeqCst);
        let drained: Vec<_> = slot.idle.lock().drain(..).collect();
        for _ in &drained {
            slot.close_one();
        }
    }

    /// Channels currently open to the replica, idle or busy.
    pub fn open_connections(&self, replica_id: &str) -> usize {
        self.slots.lock().get(replica_id).map_or(0, |s| s.open.load(Ordering::SeqCst))
    }

    /// Connections opened to the replica since the pool was created.
    pub fn connections_opened(&self, replica_id: &str) -> u64 {
        self.slots.lock().get(replica_id).map_or(0, |s| s.opened_total.load(Ordering::SeqCst))
    }

    pub fn idle_connections(&self, replica_id: &str) -> usize {
        self.slots.lock().get(replica_id).map_or(0, |s| s.idle.lock().len())
    }
}

/// A channel checked out of the pool. Dropping it without
/// [`release`](Self::release) closes the connection.
pub struct PooledConn<T> {
    conn: Option<T>,
    slot: Arc<Slot<T>>,
    permit: Option<OwnedSemaphorePermit>,
    generation: u64,
    created_at: Timestamp,
    reused: bool,
    poisoned: bool,
}

impl<T> PooledConn<T> {
    pub fn replica_id(&self) -> &str {
        &self.slot.replica_id
    }

    pub fn created_at(&self) -> Timestamp {
        self.created_at
    }

    /// Whether this channel was taken from the idle set.
    pub fn was_reused(&self) -> bool {
        self.reused
    }

    /// Marks the channel broken so it is closed instead of reused.
    pub fn poison(&mut self) {
        self.poisoned = true;
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    /// Returns the channel to the idle set, or closes it if it is poisoned,
    /// was purged, or the replica is over its cap.
    pub fn release(mut self) {
        let conn = self.conn.take().expect("channel present until release");
        let slot = &self.slot;
        let stale = slot.generation.load(Ordering::SeqCst) != self.generation;
        if self.poisoned || stale || slot.open.load(Ordering::SeqCst) > slot.cap {
            drop(conn);
            slot.close_one();
        } else {
            slot.idle.lock().push(Idle { conn, created_at: self.created_at });
        }
        self.permit.take();
    }
}

impl<T> Deref for PooledConn<T> {
    type Target = T;

    fn deref(&self) -> &T {
        self.conn.as_ref().expect("channel present until release")
    }
}

impl<T> DerefMut for PooledConn<T> {
    fn deref_mut(&mut self) -> &mut T {
        self.conn.as_mut().expect("channel present until release")
    }
}

impl<T> Drop for PooledConn<T> {
    fn drop(&mut self) {
        if self.conn.take().is_some() {
            self.slot.close_one();
        }
    }
}
