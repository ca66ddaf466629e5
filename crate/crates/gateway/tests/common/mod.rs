#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;

use gatewise_core::engine::runtime::ClockMode;
use gatewise_core::engine::server::EngineServer;
use gatewise_core::router::RoutingPolicy;
use gatewise_core::topology::{ReplicaEntry, Topology};
use gatewise_gateway::observe::{ObservationSink, RecordWriter};
use gatewise_gateway::{ContentFilter, Gateway, GatewayConfig, KeyStore};

pub const KEY: &str = "sk-test-key";

pub fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

/// Starts `n` engines with fast millisecond-scale coefficients.
pub async fn engines(n: usize) -> (Vec<EngineServer>, Topology) {
    let mut servers = Vec::new();
    let mut replicas = Vec::new();
    for i in 0..n {
        let entry = ReplicaEntry::new(format!("r{i}"), "", 2).with_latency_ms(0.2, 0.0, 1.0, 0.0);
        let server = EngineServer::start(local(), entry.replica_config().unwrap(), ClockMode::Wall).await.unwrap();
        replicas.push(ReplicaEntry { address: server.addr().to_string(), ..entry });
        servers.push(server);
    }
    (servers, Topology { policy: RoutingPolicy::LeastInflight, replicas })
}

pub struct Setup {
    pub keys: KeyStore,
    pub filter: ContentFilter,
    pub config: GatewayConfig,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            keys: KeyStore::single("tester", KEY, 1000.0, 1000),
            filter: ContentFilter::default(),
            config: GatewayConfig { listen: local(), ..Default::default() },
        }
    }
}

impl Setup {
    pub async fn start(self, topology: &Topology, dir: &Path) -> Gateway {
        let (sink, _) = ObservationSink::to_dir(dir).unwrap();
        Gateway::start(self.config, self.keys, self.filter, topology, sink).await.unwrap()
    }

    pub async fn start_with_writer(self, topology: &Topology, writer: impl RecordWriter) -> Gateway {
        let (sink, _) = ObservationSink::spawn(writer);
        Gateway::start(self.config, self.keys, self.filter, topology, sink).await.unwrap()
    }
}

pub fn body(prompt: &str, stream: bool, max_tokens: u32) -> serde_json::Value {
    serde_json::json!({
        "model": "sim",
        "messages": [{"role": "user", "content": prompt}],
        "stream": stream,
        "max_tokens": max_tokens,
    })
}

pub async fn post(gw: &Gateway, key: Option<&str>, body: &serde_json::Value) -> reqwest::Response {
    let mut req = reqwest::Client::new().post(format!("{}/v1/chat/completions", gw.url())).json(body);
    if let Some(k) = key {
        req = req.bearer_auth(k);
    }
    req.send().await.unwrap()
}

/// The `data:` payloads of an SSE body, in order.
pub fn sse_data(text: &str) -> Vec<String> {
    text.lines().filter_map(|l| l.strip_prefix("data:")).map(|d| d.trim_start().to_string()).collect()
}
