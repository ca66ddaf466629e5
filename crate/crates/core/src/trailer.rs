//! Server-side timing carried back to the client in a response trailer.
//!
//! The gateway and the engine each report offsets measured on their own
//! clocks. [`ServerTiming::place`] maps those offsets onto the client's clock
//! so that a timeline never mixes instants from two clock domains.

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;

/// Offsets in nanoseconds. Gateway offsets are relative to the gateway's
/// receipt of the request; engine offsets are relative to the engine's
/// receipt of the SUBMIT frame.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerTiming {
    pub replica_id: String,
    /// receipt → dispatch to the engine
    pub gateway_dispatch_ns: u64,
    /// receipt → first engine response at the gateway
    pub gateway_first_engine_ns: u64,
    /// receipt → first byte written toward the client
    pub gateway_first_byte_ns: u64,
    /// engine receipt → inference start
    pub engine_queue_ns: u64,
    /// inference start → the engine's response instant (first token when
    /// streaming, last token otherwise)
    pub engine_inference_ns: u64,
    /// tokens the engine reported in its DONE frame
    pub engine_total_tokens: u64,
}

/// The four server-side instants, placed on the client clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedInstants {
    pub router_received: Timestamp,
    pub engine_started: Timestamp,
    pub engine_responded: Timestamp,
    pub gateway_first_response: Timestamp,
}

impl ServerTiming {
    /// Places the server-side instants between the client's `submitted` and
    /// `first_token` instants.
    ///
    /// Transit time that neither side accounts for is split evenly between
    /// the two directions of each hop. The result is always ordered:
    /// `submitted ≤ router_received ≤ engine_started ≤ engine_responded ≤
    /// gateway_first_response ≤ first_token`.
    pub fn place(&self, submitted: Timestamp, first_token: Timestamp) -> PlacedInstants {
        let client_span = first_token.0.saturating_sub(submitted.0);
        let first_byte = self.gateway_first_byte_ns.min(client_span);
        let client_slack = client_span - first_byte;
        let received = submitted.0 + client_slack / 2;

        let first_engine = self.gateway_first_engine_ns.min(first_byte);
        let dispatch = self.gateway_dispatch_ns.min(first_engine);
        let hop = first_engine - dispatch;
        let inside = (self.engine_queue_ns + self.engine_inference_ns).min(hop);
        let queue = self.engine_queue_ns.min(inside);
        let inference = inside - queue;
        let hop_slack = hop - inside;

        let engine_started = received + dispatch + hop_slack / 2 + queue;
        PlacedInstants {
            router_received: Timestamp(received),
            engine_started: Timestamp(engine_started),
            engine_responded: Timestamp(engine_started + inference),
            gateway_first_response: Timestamp(received + first_engine),
        }
    }
}
