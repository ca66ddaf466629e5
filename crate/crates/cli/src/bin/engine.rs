use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Parser;
use gatewise_core::engine::{ClockMode, EngineServer};
use gatewise_core::topology::Topology;

/// Simulated engine replicas speaking the framed protocol.
#[derive(Parser)]
#[command(name = "gatewise-engine", version)]
struct Cli {
    /// Serve the replicas of this topology at their addresses.
    #[arg(long)]
    topology: PathBuf,
    /// Only these replica ids; all of them when omitted.
    #[arg(long = "id")]
    ids: Vec<String>,
    #[arg(long, default_value = "wall", value_parser = parse_mode)]
    clock: ClockMode,
}

fn parse_mode(s: &str) -> Result<ClockMode, String> {
    match s {
        "wall" => Ok(ClockMode::Wall),
        "virtual" => Ok(ClockMode::Virtual),
        _ => Err(format!("unknown clock mode {s:?} (wall or virtual)")),
    }
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    let topology = Topology::load(&cli.topology)?;
    let mut servers = Vec::new();
    for entry in &topology.replicas {
        if !cli.ids.is_empty() && !cli.ids.contains(&entry.id) {
            continue;
        }
        let addr: SocketAddr =
            entry.address.parse().with_context(|| format!("replica {}: bad address {:?}", entry.id, entry.address))?;
        let server = EngineServer::start(addr, entry.replica_config()?, cli.clock).await?;
        println!("{} ({}) on {}", entry.id, entry.replica_config()?.shape_label(), server.addr());
        servers.push(server);
    }
    if servers.is_empty() {
        bail!("no replica selected");
    }
    tokio::signal::ctrl_c().await?;
    for s in &servers {
        s.kill().await;
    }
    Ok(())
}
