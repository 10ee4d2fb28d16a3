//! Single-threaded event loop tying the app stacks, the relay and the
//! scripted endpoints together on one virtual clock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::net::SocketAddrV4;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::app::{AppPhase, AppTcp};
use super::endpoint::EndpointTable;
use super::scenario::{ms_to_ns, ClientOp, Scenario};
use super::trace::{AppFlowReport, OracleCheck, TraceBundle, TunnelRecord, UdpReport};
use super::upstream::{filler, SimUpstream};
use super::SimError;
use crate::attribution::{AttributionResolver, MapResolver, NullResolver};
use crate::clock::{Clock, VirtualClock};
use crate::diag::build_dns_query;
use crate::packet::{build_tcp_packet, build_udp_packet, parse_ipv4, parse_tcp, parse_udp, FlowKey, IpProtocol, Transport, UdpDatagram};
use crate::relay::{Relay, RelayConfig, UpstreamEvent};
use crate::stats::{Event, StatsStore};

const DEFAULT_MAX_TIME_NS: u64 = 3_600_000_000_000;
const FIRST_EPHEMERAL_PORT: u16 = 40000;

enum SimEvent {
    Script(usize),
    /// A packet written by the app reaches the relay.
    ToRelay(Vec<u8>),
    /// A packet written by the relay reaches the app.
    ToApp(Vec<u8>),
    Upstream(UpstreamEvent),
    AppTimer(String, u64),
    RelayTimer(u64),
}

struct UdpClient {
    key: FlowKey,
    sent: Vec<Vec<u8>>,
    received: Vec<Vec<u8>>,
}

pub(super) struct Simulation<'a> {
    scenario: &'a Scenario,
    clock: VirtualClock,
    relay: Relay,
    upstream: SimUpstream,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: BTreeMap<u64, SimEvent>,
    seq: u64,
    tunnel_delay_ns: u64,
    apps: BTreeMap<String, AppTcp>,
    /// Current owner of each app-side key (ports can be reused).
    by_key: BTreeMap<FlowKey, String>,
    open_order: Vec<String>,
    udp: BTreeMap<FlowKey, UdpClient>,
    rng: ChaCha8Rng,
    next_port: u16,
    tunnel: Vec<TunnelRecord>,
    relay_timer: Option<u64>,
    app_timers: BTreeMap<String, u64>,
}

impl<'a> Simulation<'a> {
    pub(super) fn new(scenario: &'a Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let clock = VirtualClock::new();
        let resolver: Arc<dyn AttributionResolver> = if scenario.apps.is_empty() {
            Arc::new(NullResolver)
        } else {
            Arc::new(MapResolver::from_map(&scenario.apps).map_err(|e| SimError::ScenarioInvalid(e.to_string()))?)
        };
        let mut cfg = RelayConfig {
            connect_timeout: scenario.timeout(),
            network_tag: scenario.network_tag.clone(),
            isn_seed: Some(scenario.seed),
            keep_traces: true,
            ..RelayConfig::default()
        };
        if let Some(b) = &scenario.bogus_dns {
            cfg.bogus_dns = b.clone();
        }
        let relay = Relay::new(cfg, Arc::new(clock.clone()), resolver, Arc::new(StatsStore::new()))
            .map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
        Ok(Simulation {
            scenario,
            clock,
            relay,
            upstream: SimUpstream::new(EndpointTable::new(&scenario.endpoints)),
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            seq: 0,
            tunnel_delay_ns: ms_to_ns(scenario.tunnel_delay_ms),
            apps: BTreeMap::new(),
            by_key: BTreeMap::new(),
            open_order: Vec::new(),
            udp: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x5eed_a991),
            next_port: FIRST_EPHEMERAL_PORT,
            tunnel: Vec::new(),
            relay_timer: None,
            app_timers: BTreeMap::new(),
        })
    }

    fn schedule(&mut self, t: u64, ev: SimEvent) {
        self.seq += 1;
        self.queue.push(Reverse((t, self.seq)));
        self.events.insert(self.seq, ev);
    }

    fn now(&self) -> u64 {
        self.clock.now_ns()
    }

    pub(super) fn run(mut self) -> Result<TraceBundle, SimError> {
        for (i, a) in self.scenario.client_script.iter().enumerate() {
            self.schedule(ms_to_ns(a.at_ms), SimEvent::Script(i));
        }
        let limit = self.scenario.max_time_ms.map_or(DEFAULT_MAX_TIME_NS, ms_to_ns);
        while let Some(Reverse((t, seq))) = self.queue.pop() {
            if t > limit {
                break;
            }
            let ev = self.events.remove(&seq).expect("queued event exists");
            self.clock.advance_to(t);
            self.upstream.set_now(t);
            match ev {
                SimEvent::Script(i) => self.script(i)?,
                SimEvent::ToRelay(p) => {
                    let out = self.relay.handle_tunnel_packet(&p, &mut self.upstream);
                    self.send_to_app(out);
                }
                SimEvent::ToApp(p) => self.app_rx(&p),
                SimEvent::Upstream(ev) => {
                    if let Some(ev) = self.upstream.gate(ev) {
                        let out = self.relay.handle_upstream_event(ev, &mut self.upstream);
                        self.send_to_app(out);
                    }
                }
                SimEvent::AppTimer(name, due) => {
                    let now = self.now();
                    let app = self.apps.get_mut(&name).expect("timer for known flow");
                    if app.deadline == Some(due) {
                        let segs = app.on_timer(now);
                        self.app_tx(&name, segs);
                    }
                }
                SimEvent::RelayTimer(due) => {
                    if self.relay_timer == Some(due) {
                        self.relay_timer = None;
                    }
                    let out = self.relay.poll_timers(&mut self.upstream);
                    self.send_to_app(out);
                }
            }
            self.settle();
        }
        Ok(self.finish())
    }

    /// Deliver released upstream events and reschedule timers.
    fn settle(&mut self) {
        loop {
            let released = self.upstream.take_released();
            if released.is_empty() {
                break;
            }
            for ev in released {
                if let Some(ev) = self.upstream.gate(ev) {
                    let out = self.relay.handle_upstream_event(ev, &mut self.upstream);
                    self.send_to_app(out);
                }
            }
        }
        for (t, ev) in self.upstream.take_pending() {
            self.schedule(t, SimEvent::Upstream(ev));
        }
        if let Some(d) = self.relay.next_deadline() {
            if self.relay_timer.is_none_or(|cur| d < cur) {
                self.relay_timer = Some(d);
                self.schedule(d.max(self.now()), SimEvent::RelayTimer(d));
            }
        }
    }

    fn alloc_port(&mut self, want: Option<u16>) -> u16 {
        want.unwrap_or_else(|| {
            let p = self.next_port;
            self.next_port = if p == u16::MAX { FIRST_EPHEMERAL_PORT } else { p + 1 };
            p
        })
    }

    fn script(&mut self, i: usize) -> Result<(), SimError> {
        let now = self.now();
        let op = self.scenario.client_script[i].op.clone();
        match op {
            ClientOp::Open { flow, dst, src_port } => {
                let src = SocketAddrV4::new(self.scenario.app_addr, self.alloc_port(src_port));
                let iss = self.rng.next_u32();
                let (app, syn) = AppTcp::open(src, dst, iss, now);
                if let Some(old) = self.by_key.insert(app.key, flow.clone()) {
                    log::debug!("{flow} reuses the key of {old}");
                }
                self.apps.insert(flow.clone(), app);
                self.open_order.push(flow.clone());
                self.app_tx(&flow, vec![syn]);
            }
            ClientOp::Send { flow, len, text } => {
                let data = match (len, text) {
                    (Some(n), _) => filler(self.scenario.seed.wrapping_add(i as u64), n),
                    (None, Some(t)) => t.into_bytes(),
                    (None, None) => Vec::new(),
                };
                let segs = self.app_mut(&flow)?.send(&data, now);
                self.app_tx(&flow, segs);
            }
            ClientOp::Close { flow } => {
                let segs = self.app_mut(&flow)?.close(now);
                self.app_tx(&flow, segs);
            }
            ClientOp::Reset { flow } => {
                let segs = self.app_mut(&flow)?.reset(now);
                self.app_tx(&flow, segs);
            }
            ClientOp::Udp { dst, src_port, dns_query, text, len } => {
                let data = match (dns_query, text, len) {
                    (Some(q), _, _) => build_dns_query(self.rng.next_u32() as u16, &q),
                    (None, Some(t), _) => t.into_bytes(),
                    (None, None, Some(n)) => filler(self.scenario.seed.wrapping_add(i as u64), n),
                    _ => Vec::new(),
                };
                let src = SocketAddrV4::new(self.scenario.app_addr, self.alloc_port(src_port));
                let key = FlowKey::new(Transport::Udp, src, dst);
                let d = UdpDatagram::new(src.port(), dst.port(), data.clone());
                let pkt = build_udp_packet(*src.ip(), *dst.ip(), &d).map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
                self.udp.entry(key).or_insert_with(|| UdpClient { key, sent: Vec::new(), received: Vec::new() }).sent.push(data);
                self.write_tunnel(pkt, true);
            }
        }
        Ok(())
    }

    fn app_mut(&mut self, flow: &str) -> Result<&mut AppTcp, SimError> {
        self.apps.get_mut(flow).ok_or_else(|| SimError::ScenarioInvalid(format!("unknown flow {flow:?}")))
    }

    fn write_tunnel(&mut self, pkt: Vec<u8>, to_relay: bool) {
        let now = self.now();
        let at = now + self.tunnel_delay_ns;
        // stamped as seen at the relay's end of the tunnel
        let t_ns = if to_relay { at } else { now };
        self.tunnel.push(TunnelRecord { t_ns, to_relay, bytes: pkt.clone() });
        self.schedule(at, if to_relay { SimEvent::ToRelay(pkt) } else { SimEvent::ToApp(pkt) });
    }

    fn app_tx(&mut self, flow: &str, segs: Vec<crate::packet::TcpSegment>) {
        let app = &self.apps[flow];
        let (src, dst) = (*app.key.src().ip(), *app.key.dst().ip());
        let deadline = app.deadline;
        for seg in segs {
            let pkt = build_tcp_packet(src, dst, &seg).expect("app segments fit the MTU");
            self.write_tunnel(pkt, true);
        }
        if let Some(d) = deadline {
            if self.app_timers.get(flow) != Some(&d) {
                self.app_timers.insert(flow.to_string(), d);
                self.schedule(d, SimEvent::AppTimer(flow.to_string(), d));
            }
        }
    }

    fn send_to_app(&mut self, packets: Vec<Vec<u8>>) {
        for p in packets {
            self.write_tunnel(p, false);
        }
    }

    fn app_rx(&mut self, raw: &[u8]) {
        let now = self.now();
        let Ok(ip) = parse_ipv4(raw) else { return };
        match ip.protocol {
            IpProtocol::Tcp => {
                let Ok(seg) = parse_tcp(&ip) else { return };
                let key = FlowKey::new(
                    Transport::Tcp,
                    SocketAddrV4::new(ip.dst_addr, seg.dst_port),
                    SocketAddrV4::new(ip.src_addr, seg.src_port),
                );
                let Some(flow) = self.by_key.get(&key).cloned() else { return };
                let app = self.apps.get_mut(&flow).unwrap();
                let before = app.deadline;
                let segs = app.on_segment(&seg, now);
                if app.deadline == before && segs.is_empty() {
                    return;
                }
                self.app_tx(&flow, segs);
            }
            IpProtocol::Udp => {
                let Ok(d) = parse_udp(&ip) else { return };
                let key = FlowKey::new(
                    Transport::Udp,
                    SocketAddrV4::new(ip.dst_addr, d.dst_port),
                    SocketAddrV4::new(ip.src_addr, d.src_port),
                );
                if let Some(c) = self.udp.get_mut(&key) {
                    c.received.push(d.payload);
                }
            }
            IpProtocol::Other(_) => {}
        }
    }

    fn finish(mut self) -> TraceBundle {
        let end = self.now();
        let flows = self.relay.all_traces();
        let mut samples = Vec::new();
        let mut failures = Vec::new();
        for rec in self.relay.stats().events() {
            match rec.event {
                Event::Sample(s) => samples.push(s),
                Event::Failure(f) => failures.push(f),
            }
        }
        let oracle = samples
            .iter()
            .map(|s| {
                let spec = self.scenario.endpoint(s.key.dst());
                OracleCheck {
                    key: s.key,
                    endpoint: spec.map(|e| e.label()),
                    oracle_rtt_ns: spec.and_then(|e| e.behavior.handshake_ns()),
                    measured_rtt_ns: s.rtt_ns,
                    outcome: s.outcome,
                }
            })
            .collect();
        let apps = self
            .open_order
            .iter()
            .map(|name| {
                let a = &self.apps[name];
                AppFlowReport {
                    flow: name.clone(),
                    key: a.key,
                    phase: a.phase,
                    handshake_ns: a.handshake_ns(),
                    reset_by_peer: a.reset_by_peer,
                    sent_len: a.sent.len() as u64,
                    acked_all: a.phase == AppPhase::Established && a.all_acked(),
                    received_len: a.received.len() as u64,
                    last_rx_ns: a.last_rx_at,
                    peer_fin: a.peer_fin,
                    retransmissions: a.retransmissions,
                }
            })
            .collect();
        let udp = self
            .udp
            .values()
            .map(|c| UdpReport { key: c.key, sent: c.sent.len() as u64, received: c.received.len() as u64 })
            .collect();
        let app_streams = std::mem::take(&mut self.apps)
            .into_iter()
            .map(|(k, a)| (k, (a.sent, a.received)))
            .collect();
        let udp_payloads = std::mem::take(&mut self.udp)
            .into_iter()
            .map(|(k, c)| (k, (c.sent, c.received)))
            .collect();
        let counters = self.relay.counters().clone();
        let parts = self.upstream.into_parts();
        TraceBundle {
            seed: self.scenario.seed,
            end_time_ns: end,
            samples,
            failures,
            flows,
            apps,
            udp,
            external: parts.log,
            tunnel: self.tunnel,
            oracle,
            counters,
            external_streams: parts.streams,
            external_datagrams: parts.datagrams,
            server_rx: parts.server_rx,
            app_streams,
            udp_payloads,
            script: self.scenario.client_script.clone(),
        }
    }
}
