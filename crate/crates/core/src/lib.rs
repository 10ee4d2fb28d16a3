//! Per-application RTT monitoring through a transparent user-space relay.
//!
//! Packets captured at a tunnel device are parsed ([`packet`]), each TCP
//! flow is terminated by a user-space state machine ([`utcp`]) and spliced
//! onto a real outbound connection ([`relay`]). Timing the outbound
//! connection establishment yields the SYN-ACK round-trip time
//! ([`rtt`]) without sending any traffic the apps did not send themselves.

pub mod attribution;
pub mod clock;
pub mod diag;
pub mod net_io;
pub mod packet;
pub mod relay;
pub mod rtt;
pub mod sim;
pub mod stats;
pub mod utcp;

use serde::{Deserialize, Serialize};

/// Identifier of one spliced flow and its external connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowId(pub u64);

impl std::fmt::Display for FlowId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}
