//! Disaggregated mixture-of-experts serving.
//!
//! Expert servers are stateless loops that poll per-client slots in their own
//! registered memory. Attention clients run the dense stage and the router,
//! write requests into those slots with one-sided writes, and read results
//! back. A monitor tracks heartbeats and broadcasts membership and placement
//! changes; clients fail over to replicas when a server disappears.
//!
//! Module map:
//!
//! * [`model`]: model definition, weight generation, routing, and the
//!   single-process oracle.
//! * [`placement`]: expert to server replica mapping and liveness masks.
//! * [`transport`]: one-sided write/read transport with in-process and TCP
//!   backends.
//! * [`protocol`]: byte layout and state machine of a buffer slot.
//! * [`server`]: the expert server polling loop and its batch kernels.
//! * [`client`]: dispatch, gather, failover and double-batch pipelining.
//! * [`monitor`]: heartbeat tracking and the cluster event stream.
//! * [`harness`]: scenarios, workload generation, fault injection, metrics.

pub mod client;
pub mod error;
pub mod harness;
pub mod model;
pub mod monitor;
pub mod par;
pub mod placement;
pub mod protocol;
pub mod rng;
pub mod server;
pub mod transport;

pub use error::{Error, Result};

use std::fmt;

/// Identifier of an expert server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServerId(pub u32);

/// Identifier of an attention client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub u32);

/// Global expert index within a layer.
pub type ExpertId = u32;

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "server-{}", self.0)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client-{}", self.0)
    }
}
