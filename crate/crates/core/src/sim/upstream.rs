//! [`Upstream`] implementation backed by scripted endpoints.

use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddrV4;
use std::time::Duration;

use serde::Serialize;

use super::endpoint::EndpointTable;
use super::scenario::{ServerMode, ServerStep};
use crate::relay::{Upstream, UpstreamEvent};
use crate::rtt::ConnectOutcome;
use crate::FlowId;

/// What left the simulated host toward the outside world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ExternalOp {
    Connect { dst: SocketAddrV4 },
    Data { offset: u64, len: u64 },
    Fin,
    Close,
    Udp { dst: SocketAddrV4, len: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExternalRecord {
    pub t_ns: u64,
    pub id: FlowId,
    #[serde(flatten)]
    pub op: ExternalOp,
}

struct ServerConn {
    forward_ns: u64,
    back_ns: u64,
    mode: ServerMode,
    connected: bool,
    server_closed: bool,
    paused: bool,
    held: VecDeque<UpstreamEvent>,
}

/// Scripted outside world for one simulation run.
pub struct SimUpstream {
    now_ns: u64,
    table: EndpointTable,
    conns: BTreeMap<FlowId, ServerConn>,
    udp_open: BTreeMap<FlowId, SocketAddrV4>,
    pending: Vec<(u64, UpstreamEvent)>,
    released: Vec<UpstreamEvent>,
    log: Vec<ExternalRecord>,
    /// Bytes each flow sent outward, in order.
    streams: BTreeMap<FlowId, Vec<u8>>,
    /// Datagrams each UDP flow sent outward.
    datagrams: BTreeMap<FlowId, Vec<Vec<u8>>>,
    /// Bytes the server side of each flow received.
    server_rx: BTreeMap<FlowId, Vec<u8>>,
}

impl SimUpstream {
    pub fn new(table: EndpointTable) -> Self {
        SimUpstream {
            now_ns: 0,
            table,
            conns: BTreeMap::new(),
            udp_open: BTreeMap::new(),
            pending: Vec::new(),
            released: Vec::new(),
            log: Vec::new(),
            streams: BTreeMap::new(),
            datagrams: BTreeMap::new(),
            server_rx: BTreeMap::new(),
        }
    }

    /// Set the time commands are stamped with.
    pub fn set_now(&mut self, now_ns: u64) {
        self.now_ns = now_ns;
    }

    /// Events produced by commands since the last call, with delivery times.
    pub fn take_pending(&mut self) -> Vec<(u64, UpstreamEvent)> {
        std::mem::take(&mut self.pending)
    }

    /// Decide whether an event due now reaches the relay. Events for closed
    /// flows vanish; events for paused flows wait until resumed.
    pub fn gate(&mut self, ev: UpstreamEvent) -> Option<UpstreamEvent> {
        let id = ev.id();
        if let UpstreamEvent::UdpReply { .. } = ev {
            return self.udp_open.contains_key(&id).then_some(ev);
        }
        let conn = self.conns.get_mut(&id)?;
        if let UpstreamEvent::ConnectDone { outcome, .. } = &ev {
            conn.connected = *outcome == ConnectOutcome::Connected;
            return Some(ev);
        }
        if conn.paused || !conn.held.is_empty() {
            conn.held.push_back(ev);
            return None;
        }
        Some(ev)
    }

    pub fn log(&self) -> &[ExternalRecord] {
        &self.log
    }

    pub fn into_parts(self) -> UpstreamParts {
        UpstreamParts {
            log: self.log,
            streams: self.streams,
            datagrams: self.datagrams,
            server_rx: self.server_rx,
        }
    }

    fn record(&mut self, id: FlowId, op: ExternalOp) {
        self.log.push(ExternalRecord { t_ns: self.now_ns, id, op });
    }

    fn schedule(&mut self, delay_ns: u64, ev: UpstreamEvent) {
        self.pending.push((self.now_ns + delay_ns, ev));
    }

    /// Events released by unpausing, to be delivered before anything else.
    pub fn take_released(&mut self) -> Vec<UpstreamEvent> {
        std::mem::take(&mut self.released)
    }
}

pub struct UpstreamParts {
    pub log: Vec<ExternalRecord>,
    pub streams: BTreeMap<FlowId, Vec<u8>>,
    pub datagrams: BTreeMap<FlowId, Vec<Vec<u8>>>,
    pub server_rx: BTreeMap<FlowId, Vec<u8>>,
}

/// Deterministic filler bytes for scripted server sends.
pub fn filler(seed: u64, len: usize) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut v = vec![0u8; len];
    rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

impl Upstream for SimUpstream {
    fn connect(&mut self, id: FlowId, dst: SocketAddrV4, timeout: Duration) {
        self.record(id, ExternalOp::Connect { dst });
        let h = self.table.handshake(dst, timeout);
        let t_start = self.now_ns;
        let t_end = t_start + h.elapsed_ns;
        self.schedule(h.elapsed_ns, UpstreamEvent::ConnectDone { id, outcome: h.outcome, t_start, t_end });
        let mode = h.mode.clone().unwrap_or(ServerMode::Sink);
        self.conns.insert(
            id,
            ServerConn {
                forward_ns: h.forward_ns,
                back_ns: h.back_ns,
                mode: mode.clone(),
                connected: false,
                server_closed: false,
                paused: false,
                held: VecDeque::new(),
            },
        );
        if h.outcome != ConnectOutcome::Connected {
            return;
        }
        if let ServerMode::Script(steps) = mode {
            // the server writes as soon as it accepts; bytes reach us one
            // back-delay later, i.e. together with the handshake
            for (i, step) in steps.iter().enumerate() {
                match step {
                    ServerStep::Send(n) => {
                        let data = filler(id.0 ^ ((i as u64) << 32), *n);
                        self.schedule(h.elapsed_ns, UpstreamEvent::Data { id, data });
                    }
                    ServerStep::SendText(s) => {
                        self.schedule(h.elapsed_ns, UpstreamEvent::Data { id, data: s.as_bytes().to_vec() })
                    }
                    ServerStep::Close => {
                        if let Some(c) = self.conns.get_mut(&id) {
                            c.server_closed = true;
                        }
                        self.schedule(h.elapsed_ns, UpstreamEvent::PeerClosed { id });
                        break;
                    }
                }
            }
        }
    }

    fn send(&mut self, id: FlowId, data: Vec<u8>) {
        let offset = self.streams.get(&id).map_or(0, |s| s.len()) as u64;
        self.record(id, ExternalOp::Data { offset, len: data.len() as u64 });
        self.streams.entry(id).or_default().extend_from_slice(&data);
        let Some(c) = self.conns.get(&id) else { return };
        if !c.connected {
            return;
        }
        self.server_rx.entry(id).or_default().extend_from_slice(&data);
        if c.mode == ServerMode::Echo && !c.server_closed {
            let rtt = c.forward_ns + c.back_ns;
            self.schedule(rtt, UpstreamEvent::Data { id, data });
        }
    }

    fn shutdown_write(&mut self, id: FlowId) {
        self.record(id, ExternalOp::Fin);
        let Some(c) = self.conns.get(&id) else { return };
        if !c.connected {
            return;
        }
        // every scripted server closes its side once the client has
        if !c.server_closed {
            let rtt = c.forward_ns + c.back_ns;
            self.conns.get_mut(&id).unwrap().server_closed = true;
            self.schedule(rtt, UpstreamEvent::PeerClosed { id });
        }
    }

    fn close(&mut self, id: FlowId) {
        if self.conns.remove(&id).is_some() {
            self.record(id, ExternalOp::Close);
        }
    }

    fn set_paused(&mut self, id: FlowId, paused: bool) {
        let Some(c) = self.conns.get_mut(&id) else { return };
        c.paused = paused;
        if !paused {
            self.released.extend(c.held.drain(..));
        }
    }

    fn backlog(&self, _id: FlowId) -> usize {
        0
    }

    fn udp_send(&mut self, id: FlowId, dst: SocketAddrV4, data: Vec<u8>) {
        self.record(id, ExternalOp::Udp { dst, len: data.len() as u64 });
        self.udp_open.insert(id, dst);
        if let Some((reply, rtt)) = self.table.datagram(dst, &data) {
            self.schedule(rtt, UpstreamEvent::UdpReply { id, data: reply });
        }
        self.datagrams.entry(id).or_default().push(data);
    }

    fn udp_close(&mut self, id: FlowId) {
        self.udp_open.remove(&id);
    }
}
