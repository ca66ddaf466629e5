//! Replica selection, health tracking, connection pooling and dispatch.

mod dispatch;
mod policy;
mod pool;
mod probe;
mod registry;

use thiserror::Error;

pub use dispatch::{
    DispatchError, DispatchRequest, Dispatcher, EngineChunk, EngineStream, FailoverConfig, FrameTransport,
};
pub use policy::{ReplicaView, RoutingPolicy, DEFAULT_THRESHOLD};
pub use pool::{default_pool_cap, ConnectionPool, Connector, PoolError, PooledConn, TcpConnector};
pub use probe::{probe_once, spawn_prober, Prober, TcpProber, DEFAULT_PROBE_INTERVAL};
pub use registry::{
    dispatches_while_unhealthy, Outcome, Registry, ReplicaHandle, ReplicaSnapshot, RoutingEvent, Selected,
    DEFAULT_FAILURE_LIMIT,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouterError {
    #[error("unknown replica {0}")]
    UnknownReplica(String),
    #[error("invalid routing policy: {0}")]
    InvalidPolicy(String),
    #[error("no healthy replica available")]
    NoHealthyReplica,
}
