use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use gatewise_core::topology::Topology;
use gatewise_gateway::{ContentFilter, Gateway, GatewayConfig, KeyStore, ObservationSink};

/// OpenAI-compatible gateway in front of engine replicas.
#[derive(Parser)]
#[command(name = "gatewise-gateway", version)]
struct Cli {
    #[arg(long, env = "GATEWISE_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// TOML key store with `[[keys]]` entries.
    #[arg(long, env = "GATEWISE_KEYS")]
    keys: PathBuf,
    /// One blocked term per line.
    #[arg(long, env = "GATEWISE_BLOCKLIST")]
    blocklist: Option<PathBuf>,
    /// TOML topology: routing policy and replicas.
    #[arg(long, env = "GATEWISE_TOPOLOGY")]
    topology: PathBuf,
    /// Directory for daily observation files.
    #[arg(long, env = "GATEWISE_OBS_DIR", default_value = "observations")]
    obs_dir: PathBuf,
    #[arg(long, default_value = "default")]
    model: String,
    #[arg(long, default_value_t = 3)]
    max_attempts: usize,
    #[arg(long, default_value = "1s", value_parser = humantime::parse_duration)]
    probe_interval: Duration,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    let keys = KeyStore::load(&cli.keys).with_context(|| format!("loading {}", cli.keys.display()))?;
    let filter = match &cli.blocklist {
        Some(p) => ContentFilter::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ContentFilter::default(),
    };
    let topology = Topology::load(&cli.topology)?;
    let (sink, _writer) =
        ObservationSink::to_dir(&cli.obs_dir).with_context(|| format!("opening {}", cli.obs_dir.display()))?;
    let config = GatewayConfig {
        listen: cli.listen,
        model: cli.model,
        max_attempts: cli.max_attempts,
        probe_interval: cli.probe_interval,
        ..Default::default()
    };
    let gw = Gateway::start(config, keys, filter, &topology, sink).await?;
    println!("listening on {}", gw.url());
    tokio::signal::ctrl_c().await?;
    gw.shutdown().await;
    Ok(())
}
