//! Runtime state of scripted endpoints.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::{ms_to_ns, Behavior, EndpointSpec, ServerMode};
use crate::diag::{build_dns_response, inspect_dns};
use crate::rtt::ConnectOutcome;

/// Result of offering a SYN to an endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Handshake {
    pub outcome: ConnectOutcome,
    /// Time from SYN until the connect call returns.
    pub elapsed_ns: u64,
    /// Server-side behavior once connected.
    pub mode: Option<ServerMode>,
    /// One-way delays for data after the handshake.
    pub forward_ns: u64,
    pub back_ns: u64,
}

struct Runtime {
    spec: EndpointSpec,
    rng: Option<ChaCha8Rng>,
}

/// All endpoints of a scenario, with per-endpoint random state.
pub struct EndpointTable {
    eps: BTreeMap<SocketAddrV4, Runtime>,
}

impl EndpointTable {
    pub fn new(specs: &[EndpointSpec]) -> Self {
        let eps = specs
            .iter()
            .map(|s| {
                let rng = match s.behavior {
                    Behavior::Drop { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
                    _ => None,
                };
                (s.addr, Runtime { spec: s.clone(), rng })
            })
            .collect();
        EndpointTable { eps }
    }

    pub fn spec(&self, addr: SocketAddrV4) -> Option<&EndpointSpec> {
        self.eps.get(&addr).map(|r| &r.spec)
    }

    /// Offer a TCP SYN to `dst`. Unknown destinations are unreachable.
    pub fn handshake(&mut self, dst: SocketAddrV4, timeout: Duration) -> Handshake {
        let timeout_ns = timeout.as_nanos() as u64;
        let fail = |outcome, elapsed_ns: u64| Handshake {
            outcome,
            elapsed_ns: elapsed_ns.min(timeout_ns),
            mode: None,
            forward_ns: 0,
            back_ns: 0,
        };
        let Some(rt) = self.eps.get_mut(&dst) else {
            return fail(ConnectOutcome::Unreachable, 0);
        };
        let (rtt, mode) = match &rt.spec.behavior {
            Behavior::Accept { mode, .. } => (rt.spec.behavior.handshake_ns().unwrap_or(0), mode.clone()),
            Behavior::Drop { probability, rtt_ms, .. } => {
                let lost = rt.rng.as_mut().expect("drop endpoints carry an rng").gen_bool(*probability);
                if lost {
                    return fail(ConnectOutcome::Timeout, timeout_ns);
                }
                (ms_to_ns(*rtt_ms), ServerMode::Echo)
            }
            Behavior::Refuse { rtt_ms } => {
                let rtt = ms_to_ns(*rtt_ms);
                if rtt >= timeout_ns {
                    return fail(ConnectOutcome::Timeout, timeout_ns);
                }
                return fail(ConnectOutcome::Refused, rtt);
            }
            Behavior::Blackhole => return fail(ConnectOutcome::Timeout, timeout_ns),
            Behavior::Dns { rtt_ms, .. } | Behavior::UdpEcho { rtt_ms } => {
                // no TCP listener: the host answers with RST
                return fail(ConnectOutcome::Refused, ms_to_ns(*rtt_ms));
            }
        };
        if rtt >= timeout_ns {
            return fail(ConnectOutcome::Timeout, timeout_ns);
        }
        Handshake {
            outcome: ConnectOutcome::Connected,
            elapsed_ns: rtt,
            mode: Some(mode),
            forward_ns: rtt / 2,
            back_ns: rtt - rtt / 2,
        }
    }

    /// Offer a datagram to `dst`; returns the reply and its round-trip delay.
    pub fn datagram(&self, dst: SocketAddrV4, data: &[u8]) -> Option<(Vec<u8>, u64)> {
        let rt = self.eps.get(&dst)?;
        match &rt.spec.behavior {
            Behavior::UdpEcho { rtt_ms } => Some((data.to_vec(), ms_to_ns(*rtt_ms))),
            Behavior::Dns { rtt_ms, records } => {
                let q = inspect_dns(data).ok()?;
                let answers: &[Ipv4Addr] = records.get(&q.query_name).map(Vec::as_slice).unwrap_or(&[]);
                let reply = build_dns_response(data, answers).ok()?;
                Some((reply, ms_to_ns(*rtt_ms)))
            }
            _ => None,
        }
    }
}
