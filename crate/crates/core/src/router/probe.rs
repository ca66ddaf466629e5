//! Health probing of replicas that were taken out of rotation.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use tokio::task::JoinHandle;
use tracing::info;

use super::pool::{Connector, TcpConnector};
use super::Registry;
use crate::protocol::Frame;

pub const DEFAULT_PROBE_INTERVAL: Duration = Duration::from_secs(1);

pub trait Prober: Send + Sync + 'static {
    /// Whether the replica at `address` answers.
    fn probe(&self, address: &str) -> impl Future<Output = bool> + Send;
}

/// PING over a fresh connection; healthy if the matching PONG arrives in
/// time.
#[derive(Debug, Clone)]
pub struct TcpProber {
    pub timeout: Duration,
}

impl Default for TcpProber {
    fn default() -> Self {
        Self { timeout: Duration::from_millis(500) }
    }
}

impl Prober for TcpProber {
    async fn probe(&self, address: &str) -> bool {
        let attempt = async {
            let connector = TcpConnector { connect_timeout: self.timeout };
            let mut conn = connector.connect(address).await.ok()?;
            let nonce = rand::random::<u64>();
            conn.send(Frame::Ping { nonce }).await.ok()?;
            match conn.next().await? {
                Ok(Frame::Pong { nonce: n }) if n == nonce => Some(()),
                _ => None,
            }
        };
        matches!(tokio::time::timeout(self.timeout, attempt).await, Ok(Some(())))
    }
}

/// Probes every unhealthy replica once and returns the ids that recovered.
pub async fn probe_once<P: Prober>(registry: &Registry, prober: &P) -> Vec<String> {
    let mut recovered = Vec::new();
    for (id, address) in registry.unhealthy() {
        if prober.probe(&address).await && registry.mark_healthy(&id).is_ok() {
            info!(replica = %id, "replica recovered");
            recovered.push(id);
        }
    }
    recovered
}

/// Probes unhealthy replicas every `interval` until the task is aborted.
pub fn spawn_prober<P: Prober>(registry: Arc<Registry>, prober: P, interval: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(interval);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            ticker.tick().await;
            probe_once(&registry, &prober).await;
        }
    })
}
