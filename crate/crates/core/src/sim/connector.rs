//! Blocking connector over scripted endpoints, for timing meters directly.

use std::net::SocketAddrV4;
use std::time::Duration;

use super::endpoint::EndpointTable;
use super::scenario::EndpointSpec;
use crate::clock::{Clock, VirtualClock};
use crate::rtt::{ConnectOutcome, Connector};

/// Each connect advances the virtual clock by the scripted handshake time.
pub struct SimConnector {
    clock: VirtualClock,
    table: EndpointTable,
}

impl SimConnector {
    pub fn new(clock: VirtualClock, endpoints: &[EndpointSpec]) -> Self {
        SimConnector { clock, table: EndpointTable::new(endpoints) }
    }
}

impl Connector for SimConnector {
    type Stream = ();

    fn connect(&mut self, dst: SocketAddrV4, timeout: Duration) -> Result<(), ConnectOutcome> {
        let h = self.table.handshake(dst, timeout);
        self.clock.sleep(Duration::from_nanos(h.elapsed_ns));
        match h.outcome {
            ConnectOutcome::Connected => Ok(()),
            other => Err(other),
        }
    }
}
