#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use gatewise_core::engine::{ClockMode, EngineServer, LatencyModel};
use gatewise_core::router::RoutingPolicy;
use gatewise_core::topology::{ReplicaEntry, Topology};
use gatewise_gateway::{ContentFilter, Gateway, GatewayConfig, KeyStore, ObservationSink};

pub const KEY: &str = "sk-bench";

pub fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

pub struct Cluster {
    pub engines: Vec<EngineServer>,
    pub topology: Topology,
}

/// Starts `n` wall-clock engines named `r0..` with the given model.
pub async fn cluster(n: usize, model: LatencyModel, max_batch: usize) -> Cluster {
    let ms = gatewise_core::engine::LatencyMillis::from(model);
    let mut engines = Vec::new();
    let mut replicas = Vec::new();
    for i in 0..n {
        let mut entry = ReplicaEntry::new(format!("r{i}"), "", 2).with_latency_ms(
            ms.prefill_base_ms,
            ms.prefill_per_token_ms,
            ms.decode_base_ms,
            ms.decode_per_slot_ms,
        );
        entry.max_batch = Some(max_batch);
        let server = EngineServer::start(local(), entry.replica_config().unwrap(), ClockMode::Wall).await.unwrap();
        entry.address = server.addr().to_string();
        replicas.push(entry);
        engines.push(server);
    }
    Cluster { engines, topology: Topology { policy: RoutingPolicy::LeastInflight, replicas } }
}

pub struct GatewayOptions {
    pub filter: ContentFilter,
    pub probe_interval: Duration,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self { filter: ContentFilter::default(), probe_interval: Duration::from_secs(1) }
    }
}

pub async fn gateway(topology: &Topology, obs_dir: &Path, opts: GatewayOptions) -> Gateway {
    let (sink, _) = ObservationSink::to_dir(obs_dir).unwrap();
    let config = GatewayConfig { listen: local(), probe_interval: opts.probe_interval, ..Default::default() };
    let keys = KeyStore::single("bench", KEY, 1e9, 1_000_000);
    Gateway::start(config, keys, opts.filter, topology, sink).await.unwrap()
}
