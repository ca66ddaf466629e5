//! Core of the gatewise gateway: request metrics, the simulated engine
//! replica, the gateway-to-engine wire protocol and replica routing.

pub mod calibration;
pub mod clock;
pub mod engine;
pub mod metrics;
pub mod protocol;
pub mod router;
pub mod sim;
pub mod topology;
pub mod trailer;

pub use clock::Timestamp;
pub use engine::{ClockMode, EngineServer, KvPolicy, LatencyModel, ReplicaConfig, SimRequest};
pub use metrics::{aggregate, Metric, MetricError, MetricsSummary, RequestStatus, RequestTimeline, RunWindow};
pub use protocol::{Frame, FrameCodec};
pub use router::RoutingPolicy;
pub use topology::{ReplicaEntry, Topology};
pub use trailer::ServerTiming;
