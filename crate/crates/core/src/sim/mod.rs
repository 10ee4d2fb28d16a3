//! Deterministic virtual network for exercising the relay.
//!
//! A [`Scenario`] scripts the outside world (endpoints that accept, refuse,
//! drop or ignore connections, DNS and echo servers) and an app that opens
//! flows, sends, closes and resets. [`run_scenario`] plays it through a real
//! [`Relay`](crate::relay::Relay) on a virtual clock and returns a
//! [`TraceBundle`]. Identical scenarios give identical bundles.
//!
//! The `loopback` half realizes the same endpoint behaviors with real
//! sockets on 127.0.0.1 for real-clock measurements.

use thiserror::Error;

mod app;
mod audit;
mod connector;
mod driver;
mod endpoint;
mod gen;
mod loopback;
mod overhead;
mod scenario;
mod trace;
mod upstream;

pub use app::{AppPhase, AppTcp, APP_MSS, APP_WINDOW};
pub use audit::{audit_zero_injection, AuditReport};
pub use connector::SimConnector;
pub use endpoint::{EndpointTable, Handshake};
pub use gen::random_scenario;
pub use loopback::{AppClient, AppConn, ClientError, DelayedConnector, LoopbackRelay, LoopbackWorld};
pub use overhead::{
    loopback_overhead, overhead_experiment, summarize, OverheadReport, OverheadRow, Summary,
};
pub use scenario::{ms_to_ns, Behavior, ClientAction, ClientOp, EndpointSpec, Scenario, ServerMode, ServerStep};
pub use trace::{AppFlowReport, OracleCheck, TraceBundle, TunnelRecord, UdpReport};
pub use upstream::{filler, ExternalOp, ExternalRecord, SimUpstream};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("loopback setup failed: {0}")]
    Loopback(String),
}

/// Play a scenario to completion on a fresh virtual clock.
pub fn run_scenario(s: &Scenario) -> Result<TraceBundle, SimError> {
    driver::Simulation::new(s)?.run()
}
