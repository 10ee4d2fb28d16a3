//! Splices app-facing tunnel flows onto real outbound connections.
//!
//! [`Relay`] is the single-threaded core: it consumes tunnel packets and
//! [`UpstreamEvent`]s, drives one [`TcpFlowState`] per TCP flow, issues
//! commands to an [`Upstream`], and returns the packets to write back into
//! the tunnel. The upstream owns the sockets; [`SocketUpstream`] uses real
//! ones and the simulator supplies its own.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::attribution::{AppId, AttributionResolver, FlowRegistry};
use crate::clock::Clock;
use crate::diag::{self, classify_failure, FailureRecord, RecordContext};
use crate::packet::{
    build_tcp_packet, build_udp_packet, parse_ipv4, parse_tcp, parse_udp, FlowKey, IpProtocol, PacketError,
    TcpSegment, Transport, UdpDatagram,
};
use crate::rtt::{ConnectOutcome, RttSample, SampleOutcome};
use crate::stats::{Event, StatsStore};
use crate::utcp::{
    initial_sequence, random_initial_sequence, stray_reset, CloseMode, ExternalEvent, FailReason, Phase, TcpAction,
    TcpFlowState, Transition, DEFAULT_LOCAL_MSS, DEFAULT_WINDOW,
};
use crate::FlowId;

mod live;
mod socket;

pub use live::LiveRelay;
pub use socket::SocketUpstream;

/// Extra time a real-clock connect may overrun its timeout before the
/// relay gives up on it.
pub const CONNECT_SLACK: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, PartialEq)]
pub struct RelayConfig {
    pub connect_timeout: Duration,
    pub udp_idle_expiry: Duration,
    pub max_flows: usize,
    /// Bytes buffered toward either side of one flow before reads pause.
    pub per_flow_queue: usize,
    /// Bad-checksum tunnel packets are dropped either way; strict mode also
    /// rejects them when pairing handshakes from capture files.
    pub strict_checksums: bool,
    /// How long closed flows stay in the table to absorb stragglers.
    pub linger: Duration,
    pub window: u16,
    pub local_mss: u16,
    pub network_tag: String,
    pub bogus_dns: BTreeSet<Ipv4Addr>,
    /// Derive initial sequence numbers from this seed for replayable runs.
    pub isn_seed: Option<u64>,
    /// Keep per-flow transition traces after flows end.
    pub keep_traces: bool,
}

impl Default for RelayConfig {
    fn default() -> Self {
        RelayConfig {
            connect_timeout: Duration::from_millis(3000),
            udp_idle_expiry: Duration::from_secs(60),
            max_flows: 4096,
            per_flow_queue: 256 * 1024,
            strict_checksums: false,
            linger: Duration::from_secs(2),
            window: DEFAULT_WINDOW,
            local_mss: DEFAULT_LOCAL_MSS,
            network_tag: "unlabeled".into(),
            bogus_dns: diag::default_bogus_set(),
            isn_seed: None,
            keep_traces: false,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RelayError {
    #[error("invalid relay configuration: {0}")]
    InvalidConfig(&'static str),
}

impl RelayConfig {
    pub fn validate(&self) -> Result<(), RelayError> {
        if self.connect_timeout.is_zero() {
            return Err(RelayError::InvalidConfig("connect_timeout must be positive"));
        }
        if self.max_flows == 0 {
            return Err(RelayError::InvalidConfig("max_flows must be positive"));
        }
        if self.per_flow_queue == 0 {
            return Err(RelayError::InvalidConfig("per_flow_queue must be positive"));
        }
        if self.local_mss == 0 {
            return Err(RelayError::InvalidConfig("local_mss must be positive"));
        }
        Ok(())
    }
}

/// Commands the relay issues to whatever owns the outbound sockets. All
/// calls return immediately; results arrive later as [`UpstreamEvent`]s.
pub trait Upstream {
    /// Start connecting. Exactly one `ConnectDone` follows unless the flow
    /// is closed first.
    fn connect(&mut self, id: FlowId, dst: SocketAddrV4, timeout: Duration);
    fn send(&mut self, id: FlowId, data: Vec<u8>);
    fn shutdown_write(&mut self, id: FlowId);
    /// Release everything for the flow. No events for it follow.
    fn close(&mut self, id: FlowId);
    fn set_paused(&mut self, id: FlowId, paused: bool);
    /// Bytes accepted by `send` but not yet written out.
    fn backlog(&self, id: FlowId) -> usize;
    fn udp_send(&mut self, id: FlowId, dst: SocketAddrV4, data: Vec<u8>);
    fn udp_close(&mut self, id: FlowId);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum UpstreamEvent {
    ConnectDone { id: FlowId, outcome: ConnectOutcome, t_start: u64, t_end: u64 },
    Data { id: FlowId, data: Vec<u8> },
    PeerClosed { id: FlowId },
    IoError { id: FlowId },
    UdpReply { id: FlowId, data: Vec<u8> },
}

impl UpstreamEvent {
    pub fn id(&self) -> FlowId {
        match self {
            UpstreamEvent::ConnectDone { id, .. }
            | UpstreamEvent::Data { id, .. }
            | UpstreamEvent::PeerClosed { id }
            | UpstreamEvent::IoError { id }
            | UpstreamEvent::UdpReply { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShutdownReason {
    Canceled,
    Timeout,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RelayCounters {
    pub packets_in: u64,
    pub packets_out: u64,
    pub malformed: u64,
    pub non_ipv4: u64,
    pub unsupported_protocol: u64,
    pub bad_checksum: u64,
    pub stray_segments: u64,
    pub flow_table_full: u64,
    pub dropped_segments: u64,
    pub backpressure_drops: u64,
    pub udp_dropped: u64,
    pub dns_inspected: u64,
    pub dns_malformed: u64,
    pub tcp_flows: u64,
    pub udp_flows: u64,
    pub flows_expired: u64,
    pub clock_regressions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceStep {
    pub t_ns: u64,
    pub input: String,
    pub from: String,
    pub to: String,
    pub actions: Vec<&'static str>,
}

/// Per-flow audit record kept by the relay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlowTrace {
    pub id: FlowId,
    pub key: FlowKey,
    pub app: AppId,
    pub opened_at: u64,
    pub iss: u32,
    pub irs: u32,
    pub snd_nxt: u32,
    pub rcv_nxt: u32,
    pub payload_emitted: u64,
    pub fin_emitted: bool,
    pub payload_delivered: u64,
    pub fin_consumed: bool,
    pub final_phase: String,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub steps: Vec<TraceStep>,
}

#[derive(Debug)]
pub struct TcpSplice {
    pub state: TcpFlowState,
    connect_pending: bool,
    outcome_recorded: bool,
    to_app: VecDeque<u8>,
    peer_closed_pending: bool,
    paused: bool,
    external_open: bool,
    payload_emitted: u64,
    fin_emitted: bool,
    payload_delivered: u64,
}

#[derive(Debug)]
pub enum SpliceKind {
    Tcp(Box<TcpSplice>),
    Udp,
}

#[derive(Debug)]
pub struct SpliceEntry {
    pub key: FlowKey,
    pub id: FlowId,
    pub app: AppId,
    pub opened_at: u64,
    /// Payload bytes written to the app.
    pub bytes_in: u64,
    /// Payload bytes handed to the external side.
    pub bytes_out: u64,
    pub kind: SpliceKind,
    steps: Vec<TraceStep>,
}

impl SpliceEntry {
    pub fn tcp(&self) -> Option<&TcpSplice> {
        match &self.kind {
            SpliceKind::Tcp(t) => Some(t),
            SpliceKind::Udp => None,
        }
    }

    fn trace(&self) -> FlowTrace {
        let (iss, irs, snd_nxt, rcv_nxt, emitted, fin_emitted, delivered, fin_consumed, phase) = match &self.kind {
            SpliceKind::Tcp(t) => (
                t.state.iss,
                t.state.irs,
                t.state.snd_nxt,
                t.state.rcv_nxt,
                t.payload_emitted,
                t.fin_emitted,
                t.payload_delivered,
                t.state.peer_fin,
                t.state.phase.to_string(),
            ),
            SpliceKind::Udp => (0, 0, 0, 0, self.bytes_in, false, self.bytes_out, false, "UDP".to_string()),
        };
        FlowTrace {
            id: self.id,
            key: self.key,
            app: self.app.clone(),
            opened_at: self.opened_at,
            iss,
            irs,
            snd_nxt,
            rcv_nxt,
            payload_emitted: emitted,
            fin_emitted,
            payload_delivered: delivered,
            fin_consumed,
            final_phase: phase,
            bytes_in: self.bytes_in,
            bytes_out: self.bytes_out,
            steps: self.steps.clone(),
        }
    }
}

pub struct Relay {
    cfg: RelayConfig,
    clock: Arc<dyn Clock>,
    resolver: Arc<dyn AttributionResolver>,
    stats: Arc<StatsStore>,
    registry: FlowRegistry,
    entries: BTreeMap<FlowId, SpliceEntry>,
    next_id: u64,
    counters: RelayCounters,
    out: Vec<Vec<u8>>,
    finished: Vec<FlowTrace>,
}

fn tunnel_label(seg: &TcpSegment) -> String {
    format!("tunnel {:?} seq={} ack={} len={}", seg.flags, seg.seq, seg.ack, seg.payload.len())
}

fn event_label(ev: &ExternalEvent) -> String {
    match ev {
        ExternalEvent::Connected => "external CONNECTED".into(),
        ExternalEvent::Data(d) => format!("external DATA len={}", d.len()),
        ExternalEvent::PeerClosed => "external PEER_CLOSED".into(),
        ExternalEvent::ConnectFailed(r) => format!("external CONNECT_FAILED {r:?}"),
    }
}

impl Relay {
    pub fn new(
        cfg: RelayConfig,
        clock: Arc<dyn Clock>,
        resolver: Arc<dyn AttributionResolver>,
        stats: Arc<StatsStore>,
    ) -> Result<Self, RelayError> {
        cfg.validate()?;
        Ok(Relay {
            cfg,
            clock,
            resolver,
            stats,
            registry: FlowRegistry::new(),
            entries: BTreeMap::new(),
            next_id: 1,
            counters: RelayCounters::default(),
            out: Vec::new(),
            finished: Vec::new(),
        })
    }

    pub fn config(&self) -> &RelayConfig {
        &self.cfg
    }

    pub fn counters(&self) -> &RelayCounters {
        &self.counters
    }

    pub fn stats(&self) -> &Arc<StatsStore> {
        &self.stats
    }

    pub fn active_flows(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, key: &FlowKey) -> Option<&SpliceEntry> {
        self.registry.lookup(key).and_then(|r| self.entries.get(&r.id))
    }

    pub fn flow_keys(&self) -> Vec<FlowKey> {
        self.entries.values().map(|e| e.key).collect()
    }

    /// Traces of flows that have left the table (only with `keep_traces`).
    pub fn finished_traces(&self) -> &[FlowTrace] {
        &self.finished
    }

    /// Traces of every flow, finished ones first.
    pub fn all_traces(&self) -> Vec<FlowTrace> {
        let mut v = self.finished.clone();
        v.extend(self.entries.values().map(SpliceEntry::trace));
        v
    }

    /// Earliest time `poll_timers` has work to do.
    pub fn next_deadline(&self) -> Option<u64> {
        let backstop = if self.clock.is_virtual() {
            None
        } else {
            let limit = (self.cfg.connect_timeout + CONNECT_SLACK).as_nanos() as u64;
            self.entries
                .values()
                .filter(|e| e.tcp().is_some_and(|t| t.connect_pending))
                .map(|e| e.opened_at + limit)
                .min()
        };
        [self.registry.next_deadline(), backstop].into_iter().flatten().min()
    }

    fn take_out(&mut self) -> Vec<Vec<u8>> {
        self.counters.packets_out += self.out.len() as u64;
        std::mem::take(&mut self.out)
    }

    /// Process one datagram read from the tunnel.
    pub fn handle_tunnel_packet(&mut self, raw: &[u8], up: &mut dyn Upstream) -> Vec<Vec<u8>> {
        self.counters.packets_in += 1;
        match parse_ipv4(raw) {
            Ok(ip) if !ip.checksum_ok => self.counters.bad_checksum += 1,
            Ok(ip) => match ip.protocol {
                IpProtocol::Tcp => match parse_tcp(&ip) {
                    Ok(seg) if seg.checksum_ok => self.on_tcp(ip.src_addr, ip.dst_addr, seg, up),
                    Ok(_) => self.counters.bad_checksum += 1,
                    Err(_) => self.counters.malformed += 1,
                },
                IpProtocol::Udp => match parse_udp(&ip) {
                    Ok(d) if d.checksum_ok => self.on_udp(ip.src_addr, ip.dst_addr, d, up),
                    Ok(_) => self.counters.bad_checksum += 1,
                    Err(_) => self.counters.malformed += 1,
                },
                IpProtocol::Other(_) => self.counters.unsupported_protocol += 1,
            },
            Err(PacketError::UnsupportedVersion(_)) => self.counters.non_ipv4 += 1,
            Err(_) => self.counters.malformed += 1,
        }
        self.take_out()
    }

    pub fn handle_upstream_event(&mut self, ev: UpstreamEvent, up: &mut dyn Upstream) -> Vec<Vec<u8>> {
        match ev {
            UpstreamEvent::ConnectDone { id, outcome, t_start, t_end } => {
                self.on_connect_done(id, outcome, t_start, t_end, up)
            }
            UpstreamEvent::Data { id, data } => self.on_external_data(id, data, up),
            UpstreamEvent::PeerClosed { id } => {
                if let Some(t) = self.tcp_mut(id) {
                    t.peer_closed_pending = true;
                    self.flush_to_app(id, up);
                }
            }
            UpstreamEvent::IoError { id } => {
                let live = self.tcp_mut(id).is_some_and(|t| !t.state.phase.is_terminal());
                if live {
                    self.external_event(id, ExternalEvent::ConnectFailed(FailReason::Io), up);
                }
            }
            UpstreamEvent::UdpReply { id, data } => self.on_udp_reply(id, data),
        }
        self.take_out()
    }

    /// Expire lingering and idle flows and give up on overdue connects.
    pub fn poll_timers(&mut self, up: &mut dyn Upstream) -> Vec<Vec<u8>> {
        let now = self.clock.now_ns();
        for (_, reg) in self.registry.expire_flows(now) {
            self.counters.flows_expired += 1;
            self.retire(reg.id, up);
        }
        if !self.clock.is_virtual() {
            let limit = (self.cfg.connect_timeout + CONNECT_SLACK).as_nanos() as u64;
            let overdue: Vec<FlowKey> = self
                .entries
                .values()
                .filter(|e| e.tcp().is_some_and(|t| t.connect_pending) && now >= e.opened_at + limit)
                .map(|e| e.key)
                .collect();
            for key in overdue {
                self.shutdown_flow_inner(&key, ShutdownReason::Timeout, up);
            }
        }
        self.take_out()
    }

    /// Tear a flow down from the relay side. Repeated calls are no-ops.
    pub fn shutdown_flow(&mut self, key: &FlowKey, reason: ShutdownReason, up: &mut dyn Upstream) -> Vec<Vec<u8>> {
        self.shutdown_flow_inner(key, reason, up);
        self.take_out()
    }

    /// Abort every flow and drop them from the table.
    pub fn shutdown_all(&mut self, up: &mut dyn Upstream) -> Vec<Vec<u8>> {
        let keys: Vec<FlowKey> = self.entries.values().map(|e| e.key).collect();
        for key in &keys {
            self.shutdown_flow_inner(key, ShutdownReason::Canceled, up);
        }
        let ids: Vec<FlowId> = self.entries.keys().copied().collect();
        for id in ids {
            if let Some(e) = self.entries.get(&id) {
                self.registry.remove(&e.key);
            }
            self.retire(id, up);
        }
        self.take_out()
    }

    fn shutdown_flow_inner(&mut self, key: &FlowKey, reason: ShutdownReason, up: &mut dyn Upstream) {
        let Some(reg) = self.registry.lookup(key) else { return };
        let id = reg.id;
        let now = self.clock.now_ns();
        let is_udp = matches!(self.entries.get(&id).map(|e| &e.kind), Some(SpliceKind::Udp));
        if is_udp {
            self.registry.set_deadline(key, Some(now));
            return;
        }
        let Some(entry) = self.entries.get_mut(&id) else { return };
        let SpliceKind::Tcp(t) = &mut entry.kind else { return };
        if t.state.phase.is_terminal() {
            return;
        }
        if t.connect_pending && !t.outcome_recorded {
            t.connect_pending = false;
            t.outcome_recorded = true;
            let (t_start, key, app) = (entry.opened_at, entry.key, entry.app.clone());
            match reason {
                ShutdownReason::Timeout => self.record_connect(key, app, ConnectOutcome::Timeout, t_start, now),
                ShutdownReason::Canceled => self.record_canceled(key, app, t_start, now),
            }
        }
        let tr = self.tcp_mut(id).unwrap().state.abort();
        self.apply(id, tr, "relay ABORT".into(), up);
    }

    fn alloc_id(&mut self) -> FlowId {
        let id = FlowId(self.next_id);
        self.next_id += 1;
        id
    }

    fn tcp_mut(&mut self, id: FlowId) -> Option<&mut TcpSplice> {
        match &mut self.entries.get_mut(&id)?.kind {
            SpliceKind::Tcp(t) => Some(t),
            SpliceKind::Udp => None,
        }
    }

    fn emit_tcp(&mut self, key: &FlowKey, seg: &TcpSegment) {
        match build_tcp_packet(key.dst_addr, key.src_addr, seg) {
            Ok(p) => self.out.push(p),
            Err(e) => log::error!("cannot build segment for {key}: {e}"),
        }
    }

    /// Drop a flow's table entry and upstream resources.
    fn retire(&mut self, id: FlowId, up: &mut dyn Upstream) {
        let Some(entry) = self.entries.remove(&id) else { return };
        match &entry.kind {
            SpliceKind::Udp => up.udp_close(id),
            SpliceKind::Tcp(t) => {
                if t.external_open {
                    up.close(id);
                }
            }
        }
        if self.cfg.keep_traces {
            self.finished.push(entry.trace());
        }
    }

    fn on_tcp(&mut self, src: Ipv4Addr, dst: Ipv4Addr, seg: TcpSegment, up: &mut dyn Upstream) {
        let key = FlowKey::new(Transport::Tcp, SocketAddrV4::new(src, seg.src_port), SocketAddrV4::new(dst, seg.dst_port));
        let fresh_syn = seg.flags.syn() && !seg.flags.ack() && !seg.flags.rst();
        let mut existing = self.registry.lookup(&key);
        if let Some(reg) = &existing {
            let reusable = self.entries.get(&reg.id).and_then(SpliceEntry::tcp).is_some_and(|t| {
                matches!(t.state.phase, Phase::TimeWaitBrief | Phase::Aborted) && t.state.irs != seg.seq
            });
            if fresh_syn && reusable {
                self.registry.remove(&key);
                self.retire(reg.id, up);
                existing = None;
            }
        }
        if let Some(reg) = existing {
            if !seg.payload.is_empty() && up.backlog(reg.id) > self.cfg.per_flow_queue {
                // no ACK: the app's stack will retransmit once the queue drains
                self.counters.backpressure_drops += 1;
                return;
            }
            let Some(t) = self.tcp_mut(reg.id) else { return };
            let tr = t.state.on_tunnel_segment(&seg);
            self.apply(reg.id, tr, tunnel_label(&seg), up);
            self.flush_to_app(reg.id, up);
            return;
        }
        if !fresh_syn {
            if !seg.flags.rst() {
                self.emit_tcp(&key, &stray_reset(&seg));
            }
            self.counters.stray_segments += 1;
            return;
        }
        if self.entries.len() >= self.cfg.max_flows {
            self.counters.flow_table_full += 1;
            self.emit_tcp(&key, &stray_reset(&seg));
            return;
        }
        let id = self.alloc_id();
        let app = match self.registry.register_flow(key, id, &*self.resolver) {
            Ok(app) => app,
            Err(e) => {
                log::error!("{e}");
                return;
            }
        };
        let iss = match self.cfg.isn_seed {
            Some(seed) => initial_sequence(seed.wrapping_add(id.0)),
            None => random_initial_sequence(),
        };
        let state = TcpFlowState::new(key, iss, id).with_window(self.cfg.window).with_local_mss(self.cfg.local_mss);
        let tr = state.on_tunnel_segment(&seg);
        self.counters.tcp_flows += 1;
        self.entries.insert(
            id,
            SpliceEntry {
                key,
                id,
                app,
                opened_at: self.clock.now_ns(),
                bytes_in: 0,
                bytes_out: 0,
                kind: SpliceKind::Tcp(Box::new(TcpSplice {
                    state,
                    connect_pending: false,
                    outcome_recorded: false,
                    to_app: VecDeque::new(),
                    peer_closed_pending: false,
                    paused: false,
                    external_open: false,
                    payload_emitted: 0,
                    fin_emitted: false,
                    payload_delivered: 0,
                })),
                steps: Vec::new(),
            },
        );
        self.apply(id, tr, tunnel_label(&seg), up);
    }

    fn external_event(&mut self, id: FlowId, ev: ExternalEvent, up: &mut dyn Upstream) {
        let Some(t) = self.tcp_mut(id) else { return };
        let tr = t.state.on_external_event(&ev);
        self.apply(id, tr, event_label(&ev), up);
    }

    /// Install a transition and carry out its actions in order.
    fn apply(&mut self, id: FlowId, tr: Transition, input: String, up: &mut dyn Upstream) {
        let now = self.clock.now_ns();
        let keep = self.cfg.keep_traces;
        let timeout = self.cfg.connect_timeout;
        let linger = self.cfg.linger.as_nanos() as u64;
        let Some(entry) = self.entries.get_mut(&id) else { return };
        let key = entry.key;
        let SpliceKind::Tcp(t) = &mut entry.kind else { return };
        if let Some(fault) = &tr.fault {
            log::debug!("{key}: {fault:?}");
        }
        let from = t.state.table_state();
        t.state = tr.state;
        if keep {
            entry.steps.push(TraceStep {
                t_ns: now,
                input,
                from,
                to: t.state.table_state(),
                actions: tr.actions.iter().map(TcpAction::label).collect(),
            });
        }
        let mut packets = Vec::new();
        for action in tr.actions {
            match action {
                TcpAction::EmitSegment(seg) => {
                    if !seg.payload.is_empty() {
                        entry.bytes_in += seg.payload.len() as u64;
                        t.payload_emitted += seg.payload.len() as u64;
                    }
                    t.fin_emitted |= seg.flags.fin();
                    packets.push(seg);
                }
                TcpAction::Reset(seg) => packets.push(seg),
                TcpAction::DeliverPayload(bytes) => {
                    entry.bytes_out += bytes.len() as u64;
                    t.payload_delivered += bytes.len() as u64;
                    up.send(id, bytes);
                }
                TcpAction::OpenExternal(k) => {
                    t.connect_pending = true;
                    t.external_open = true;
                    entry.opened_at = now;
                    up.connect(id, k.dst(), timeout);
                }
                TcpAction::CloseExternal(CloseMode::Half) => up.shutdown_write(id),
                TcpAction::CloseExternal(CloseMode::Abort) => {
                    if t.external_open {
                        t.external_open = false;
                        up.close(id);
                    }
                }
                TcpAction::Drop => self.counters.dropped_segments += 1,
            }
        }
        let phase = t.state.phase;
        let canceled = phase == Phase::Aborted && t.connect_pending && !t.outcome_recorded;
        if matches!(phase, Phase::Aborted | Phase::TimeWaitBrief) {
            t.connect_pending = false;
            if t.external_open {
                t.external_open = false;
                up.close(id);
            }
            if self.registry.lookup(&key).is_some_and(|r| r.deadline_ns.is_none()) {
                self.registry.set_deadline(&key, Some(now + linger));
            }
        }
        if canceled {
            t.outcome_recorded = true;
            let (opened, app) = (entry.opened_at, entry.app.clone());
            self.record_canceled(key, app, opened, now);
        }
        for seg in &packets {
            self.emit_tcp(&key, seg);
        }
    }

    fn record_connect(&mut self, key: FlowKey, app: AppId, outcome: ConnectOutcome, t_start: u64, t_end: u64) {
        if t_end < t_start {
            self.counters.clock_regressions += 1;
            log::warn!("{key}: clock regression, sample discarded");
            return;
        }
        let wall_time = self.clock.wall_time();
        let sample = RttSample {
            key,
            app: app.clone(),
            t_start,
            t_end,
            rtt_ns: t_end - t_start,
            outcome: outcome.into(),
            network_tag: self.cfg.network_tag.clone(),
            wall_time,
        };
        let mut events = vec![Event::Sample(sample)];
        if outcome != ConnectOutcome::Connected {
            let elapsed = Duration::from_nanos(t_end - t_start);
            events.push(Event::Failure(FailureRecord {
                key,
                app,
                class: classify_failure(outcome, elapsed, self.cfg.connect_timeout),
                evidence: format!("{outcome:?} after {} ns to {}", t_end - t_start, key.dst()),
                wall_time,
            }));
        }
        if let Err(e) = self.stats.record_all(events) {
            log::error!("recording sample: {e}");
        }
    }

    fn record_canceled(&mut self, key: FlowKey, app: AppId, t_start: u64, t_end: u64) {
        let sample = RttSample {
            key,
            app,
            t_start,
            t_end,
            rtt_ns: t_end.saturating_sub(t_start),
            outcome: SampleOutcome::Canceled,
            network_tag: self.cfg.network_tag.clone(),
            wall_time: self.clock.wall_time(),
        };
        if let Err(e) = self.stats.record_sample(sample) {
            log::error!("recording sample: {e}");
        }
    }

    fn on_connect_done(&mut self, id: FlowId, outcome: ConnectOutcome, t_start: u64, t_end: u64, up: &mut dyn Upstream) {
        let Some(entry) = self.entries.get_mut(&id) else {
            up.close(id);
            return;
        };
        let (key, app) = (entry.key, entry.app.clone());
        let SpliceKind::Tcp(t) = &mut entry.kind else { return };
        if !t.connect_pending {
            return;
        }
        t.connect_pending = false;
        t.outcome_recorded = true;
        self.record_connect(key, app, outcome, t_start, t_end);
        let ev = match outcome {
            ConnectOutcome::Connected => ExternalEvent::Connected,
            ConnectOutcome::Refused => ExternalEvent::ConnectFailed(FailReason::Refused),
            ConnectOutcome::Unreachable => ExternalEvent::ConnectFailed(FailReason::Unreachable),
            ConnectOutcome::Timeout => ExternalEvent::ConnectFailed(FailReason::Timeout),
        };
        self.external_event(id, ev, up);
    }

    fn on_external_data(&mut self, id: FlowId, data: Vec<u8>, up: &mut dyn Upstream) {
        let limit = self.cfg.per_flow_queue;
        let Some(t) = self.tcp_mut(id) else { return };
        if t.state.phase.is_terminal() {
            return;
        }
        t.to_app.extend(data);
        if t.to_app.len() > limit && !t.paused {
            t.paused = true;
            up.set_paused(id, true);
        }
        self.flush_to_app(id, up);
    }

    /// Move queued external bytes into the app's receive window, then pass
    /// on a deferred close once the queue is empty.
    fn flush_to_app(&mut self, id: FlowId, up: &mut dyn Upstream) {
        let limit = self.cfg.per_flow_queue;
        loop {
            let Some(t) = self.tcp_mut(id) else { return };
            if !t.state.accepts_external_data() || t.to_app.is_empty() {
                break;
            }
            let avail = (t.state.peer_window as u32).saturating_sub(t.state.in_flight()) as usize;
            if avail == 0 {
                break;
            }
            let n = avail.min(t.to_app.len());
            let chunk: Vec<u8> = t.to_app.drain(..n).collect();
            self.external_event(id, ExternalEvent::Data(chunk), up);
        }
        let Some(t) = self.tcp_mut(id) else { return };
        if t.paused && t.to_app.len() <= limit / 2 {
            t.paused = false;
            up.set_paused(id, false);
        }
        if t.peer_closed_pending && t.to_app.is_empty() && t.state.accepts_external_data() {
            t.peer_closed_pending = false;
            self.external_event(id, ExternalEvent::PeerClosed, up);
        }
    }

    fn on_udp(&mut self, src: Ipv4Addr, dst: Ipv4Addr, d: UdpDatagram, up: &mut dyn Upstream) {
        let key = FlowKey::new(Transport::Udp, SocketAddrV4::new(src, d.src_port), SocketAddrV4::new(dst, d.dst_port));
        let now = self.clock.now_ns();
        let idle = self.cfg.udp_idle_expiry.as_nanos() as u64;
        let mut existing = self.registry.lookup(&key);
        if let Some(reg) = &existing {
            if reg.deadline_ns.is_some_and(|dl| dl <= now) {
                self.registry.remove(&key);
                self.counters.flows_expired += 1;
                self.retire(reg.id, up);
                existing = None;
            }
        }
        let id = match existing {
            Some(reg) => reg.id,
            None => {
                if self.entries.len() >= self.cfg.max_flows {
                    self.counters.flow_table_full += 1;
                    self.counters.udp_dropped += 1;
                    return;
                }
                let id = self.alloc_id();
                let app = match self.registry.register_flow(key, id, &*self.resolver) {
                    Ok(app) => app,
                    Err(e) => {
                        log::error!("{e}");
                        return;
                    }
                };
                self.counters.udp_flows += 1;
                self.entries.insert(
                    id,
                    SpliceEntry {
                        key,
                        id,
                        app,
                        opened_at: now,
                        bytes_in: 0,
                        bytes_out: 0,
                        kind: SpliceKind::Udp,
                        steps: Vec::new(),
                    },
                );
                id
            }
        };
        self.registry.set_deadline(&key, Some(now + idle));
        let entry = self.entries.get_mut(&id).unwrap();
        entry.bytes_out += d.payload.len() as u64;
        up.udp_send(id, key.dst(), d.payload);
    }

    fn on_udp_reply(&mut self, id: FlowId, data: Vec<u8>) {
        let now = self.clock.now_ns();
        let idle = self.cfg.udp_idle_expiry.as_nanos() as u64;
        let Some(entry) = self.entries.get_mut(&id) else { return };
        if !matches!(entry.kind, SpliceKind::Udp) {
            return;
        }
        let key = entry.key;
        let reply = UdpDatagram::new(key.dst_port, key.src_port, data);
        let packet = match build_udp_packet(key.dst_addr, key.src_addr, &reply) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("{key}: dropping reply: {e}");
                self.counters.udp_dropped += 1;
                return;
            }
        };
        entry.bytes_in += reply.payload.len() as u64;
        let app = entry.app.clone();
        self.registry.set_deadline(&key, Some(now + idle));
        if key.dst_port == 53 {
            self.inspect_dns_reply(key, app, &reply.payload);
        }
        self.out.push(packet);
    }

    fn inspect_dns_reply(&mut self, key: FlowKey, app: AppId, payload: &[u8]) {
        self.counters.dns_inspected += 1;
        let summary = match diag::inspect_dns(payload) {
            Ok(s) => s,
            Err(e) => {
                log::debug!("{key}: {e}");
                self.counters.dns_malformed += 1;
                return;
            }
        };
        let ctx = RecordContext { key, app, wall_time: self.clock.wall_time() };
        if let Some(rec) = diag::flag_misconfig(&summary, &self.cfg.bogus_dns, &ctx) {
            if let Err(e) = self.stats.record_failure(rec) {
                log::error!("recording failure: {e}");
            }
        }
    }
}
