//! OpenAI-compatible gateway: authentication, rate limiting, content
//! filtering, routing with failover, SSE token relay and on-disk
//! observations.

pub mod api;
pub mod auth;
pub mod filter;
pub mod limiter;
pub mod observe;
pub mod service;

pub use auth::{hash_key_hex, ApiKeyRecord, KeyStore};
pub use filter::ContentFilter;
pub use observe::{ObservationRecord, ObservationSink, ObservationStatus};
pub use service::{Gateway, GatewayConfig};
