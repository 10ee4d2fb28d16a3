//! Real-socket counterpart of the simulator on 127.0.0.1.
//!
//! Scripted endpoints become local listeners. External addresses are mapped
//! onto them by [`DelayedConnector`], which also realizes scripted handshake
//! delays as timed waits after the real connect returns.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{Ipv4Addr, Shutdown, SocketAddr, SocketAddrV4, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socket2::{Domain, Protocol, SockAddr, Socket, Type};
use thiserror::Error;

use super::app::{AppPhase, AppTcp};
use super::endpoint::EndpointTable;
use super::scenario::{Behavior, EndpointSpec, ServerMode, ServerStep};
use super::upstream::filler;
use super::SimError;
use crate::attribution::AttributionResolver;
use crate::clock::{Clock, MonotonicClock};
use crate::net_io::{sim_channel, NetIoError, PacketChannel, SimChannelEnd};
use crate::packet::{build_tcp_packet, parse_ipv4, parse_tcp, TcpSegment};
use crate::relay::{LiveRelay, Relay, RelayConfig};
use crate::rtt::{ConnectOutcome, Connector};
use crate::stats::StatsStore;

const ACCEPT_POLL: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, Copy)]
struct Route {
    local: SocketAddrV4,
    delay: Duration,
}

/// Connects to the local stand-in for an external address and stretches
/// the call to the scripted handshake time.
#[derive(Debug, Clone, Default)]
pub struct DelayedConnector {
    routes: Arc<BTreeMap<SocketAddrV4, Route>>,
}

impl Connector for DelayedConnector {
    type Stream = TcpStream;

    fn connect(&mut self, dst: SocketAddrV4, timeout: Duration) -> Result<TcpStream, ConnectOutcome> {
        let t0 = Instant::now();
        let route = self.routes.get(&dst).copied();
        let target = route.map_or(dst, |r| r.local);
        let res = TcpStream::connect_timeout(&SocketAddr::V4(target), timeout).map_err(|e| ConnectOutcome::from_io_error(&e));
        let Some(r) = route else { return res };
        if matches!(res, Ok(_) | Err(ConnectOutcome::Refused)) {
            let until = t0 + r.delay.min(timeout);
            let now = Instant::now();
            if until > now {
                thread::sleep(until - now);
            }
            if r.delay >= timeout {
                return Err(ConnectOutcome::Timeout);
            }
        }
        res
    }

    fn route(&self, dst: SocketAddrV4) -> SocketAddrV4 {
        self.routes.get(&dst).map_or(dst, |r| r.local)
    }
}

/// Local listeners standing in for a scenario's endpoints.
pub struct LoopbackWorld {
    routes: Arc<BTreeMap<SocketAddrV4, Route>>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    // keep the blackhole's accept queue full
    _held: Vec<Socket>,
}

fn local_any() -> SocketAddrV4 {
    SocketAddrV4::new(Ipv4Addr::LOCALHOST, 0)
}

fn v4(addr: SocketAddr) -> SocketAddrV4 {
    match addr {
        SocketAddr::V4(a) => a,
        SocketAddr::V6(_) => unreachable!("bound to an IPv4 address"),
    }
}

fn serve_tcp(mut s: TcpStream, mode: ServerMode, seed: u64) {
    let _ = s.set_nodelay(true);
    let mut buf = vec![0u8; 64 * 1024];
    if let ServerMode::Script(steps) = &mode {
        for (i, step) in steps.iter().enumerate() {
            let ok = match step {
                ServerStep::Send(n) => s.write_all(&filler(seed ^ ((i as u64) << 32), *n)).is_ok(),
                ServerStep::SendText(t) => s.write_all(t.as_bytes()).is_ok(),
                ServerStep::Close => {
                    let _ = s.shutdown(Shutdown::Write);
                    break;
                }
            };
            if !ok {
                return;
            }
        }
    }
    loop {
        match s.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if mode == ServerMode::Echo && s.write_all(&buf[..n]).is_err() {
                    return;
                }
            }
        }
    }
    let _ = s.shutdown(Shutdown::Write);
}

fn blackhole() -> std::io::Result<(SocketAddrV4, Vec<Socket>)> {
    let l = Socket::new(Domain::IPV4, Type::STREAM, Some(Protocol::TCP))?;
    l.bind(&SockAddr::from(local_any()))?;
    l.listen(0)?;
    let addr = l.local_addr()?.as_socket_ipv4().expect("IPv4 listener");
    let mut held = vec![l];
    // fill the accept queue; once full, further SYNs are silently dropped
    for _ in 0..16 {
        match TcpStream::connect_timeout(&SocketAddr::V4(addr), Duration::from_millis(150)) {
            Ok(s) => held.push(Socket::from(s)),
            Err(_) => return Ok((addr, held)),
        }
    }
    Err(std::io::Error::other("accept queue never filled"))
}

impl LoopbackWorld {
    pub fn start(endpoints: &[EndpointSpec]) -> Result<Self, SimError> {
        let err = |e: std::io::Error| SimError::Loopback(e.to_string());
        let stop = Arc::new(AtomicBool::new(false));
        let mut routes = BTreeMap::new();
        let mut threads = Vec::new();
        let mut held = Vec::new();
        for ep in endpoints {
            let delay = Duration::from_nanos(ep.behavior.handshake_ns().unwrap_or(0));
            let local = match &ep.behavior {
                Behavior::Accept { .. } | Behavior::Drop { .. } => {
                    let listener = TcpListener::bind(local_any()).map_err(err)?;
                    listener.set_nonblocking(true).map_err(err)?;
                    let addr = v4(listener.local_addr().map_err(err)?);
                    let stop = stop.clone();
                    let mode = match &ep.behavior {
                        Behavior::Accept { mode, .. } => mode.clone(),
                        _ => ServerMode::Echo,
                    };
                    threads.push(thread::spawn(move || {
                        let mut n = 0u64;
                        while !stop.load(Ordering::Acquire) {
                            match listener.accept() {
                                Ok((s, _)) => {
                                    let _ = s.set_nonblocking(false);
                                    let mode = mode.clone();
                                    n += 1;
                                    thread::spawn(move || serve_tcp(s, mode, n));
                                }
                                Err(_) => thread::sleep(ACCEPT_POLL),
                            }
                        }
                    }));
                    addr
                }
                Behavior::Refuse { .. } => {
                    // a port that was just released answers SYNs with RST
                    let l = TcpListener::bind(local_any()).map_err(err)?;
                    v4(l.local_addr().map_err(err)?)
                }
                Behavior::Blackhole => {
                    let (addr, sockets) = blackhole().map_err(err)?;
                    held.extend(sockets);
                    addr
                }
                Behavior::Dns { .. } | Behavior::UdpEcho { .. } => {
                    let sock = UdpSocket::bind(local_any()).map_err(err)?;
                    sock.set_read_timeout(Some(Duration::from_millis(50))).map_err(err)?;
                    let addr = v4(sock.local_addr().map_err(err)?);
                    let table = EndpointTable::new(std::slice::from_ref(ep));
                    let external = ep.addr;
                    let stop = stop.clone();
                    threads.push(thread::spawn(move || {
                        let mut buf = vec![0u8; 65536];
                        while !stop.load(Ordering::Acquire) {
                            let Ok((n, from)) = sock.recv_from(&mut buf) else { continue };
                            if let Some((reply, delay_ns)) = table.datagram(external, &buf[..n]) {
                                thread::sleep(Duration::from_nanos(delay_ns));
                                let _ = sock.send_to(&reply, from);
                            }
                        }
                    }));
                    addr
                }
            };
            routes.insert(ep.addr, Route { local, delay });
        }
        Ok(LoopbackWorld { routes: Arc::new(routes), stop, threads, _held: held })
    }

    pub fn connector(&self) -> DelayedConnector {
        DelayedConnector { routes: self.routes.clone() }
    }

    /// Local address standing in for `external`.
    pub fn local_addr(&self, external: SocketAddrV4) -> Option<SocketAddrV4> {
        self.routes.get(&external).map(|r| r.local)
    }
}

impl Drop for LoopbackWorld {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// A live relay on the real clock whose tunnel is an in-memory channel.
pub struct LoopbackRelay {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<Relay>>,
    app_end: SimChannelEnd,
    clock: Arc<dyn Clock>,
    stats: Arc<StatsStore>,
}

impl LoopbackRelay {
    pub fn start<C>(cfg: RelayConfig, connector: C, resolver: Arc<dyn AttributionResolver>) -> Result<Self, SimError>
    where
        C: Connector<Stream = TcpStream> + Clone + Send + 'static,
    {
        let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new());
        let stats = Arc::new(StatsStore::new());
        let relay = Relay::new(cfg, clock.clone(), resolver, stats.clone()).map_err(|e| SimError::Loopback(e.to_string()))?;
        let (app_end, relay_end) = sim_channel(clock.clone(), Duration::ZERO, Duration::ZERO);
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::Builder::new()
            .name("loopback-relay".into())
            .spawn(move || {
                let mut live = LiveRelay::new(relay, connector, Arc::new(relay_end));
                if let Err(e) = live.run(&flag, |_| {}) {
                    log::warn!("loopback relay stopped: {e}");
                }
                live.into_relay()
            })
            .map_err(|e| SimError::Loopback(e.to_string()))?;
        Ok(LoopbackRelay { stop, handle: Some(handle), app_end, clock, stats })
    }

    pub fn client(&self, app_addr: Ipv4Addr, seed: u64) -> AppClient {
        AppClient::new(self.app_end.clone(), self.clock.clone(), app_addr, seed)
    }

    pub fn stats(&self) -> &Arc<StatsStore> {
        &self.stats
    }

    /// Stop relaying, abort remaining flows and hand back the relay.
    pub fn stop(mut self) -> Relay {
        self.stop.store(true, Ordering::Release);
        self.handle.take().expect("running").join().expect("relay thread panicked")
    }
}

impl Drop for LoopbackRelay {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection refused")]
    Refused,
    #[error("timed out")]
    Timeout,
    #[error("connection reset")]
    Reset,
    #[error(transparent)]
    Channel(#[from] NetIoError),
}

pub struct AppConn {
    pub tcp: AppTcp,
}

/// Blocking app-side endpoint of a tunnel, one connection at a time.
pub struct AppClient {
    chan: SimChannelEnd,
    clock: Arc<dyn Clock>,
    app_addr: Ipv4Addr,
    next_port: u16,
    rng: ChaCha8Rng,
}

impl AppClient {
    pub fn new(chan: SimChannelEnd, clock: Arc<dyn Clock>, app_addr: Ipv4Addr, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next_port = 20000 + (rng.next_u32() % 20000) as u16;
        AppClient { chan, clock, app_addr, next_port, rng }
    }

    fn write(&self, tcp: &AppTcp, segs: Vec<TcpSegment>) -> Result<(), ClientError> {
        for seg in segs {
            let pkt = build_tcp_packet(*tcp.key.src().ip(), *tcp.key.dst().ip(), &seg).expect("segment fits");
            self.chan.write_packet(&pkt)?;
        }
        Ok(())
    }

    pub fn connect(&mut self, dst: SocketAddrV4, timeout: Duration) -> Result<AppConn, ClientError> {
        let port = self.next_port;
        self.next_port = if port >= 60000 { 20000 } else { port + 1 };
        let src = SocketAddrV4::new(self.app_addr, port);
        let (tcp, syn) = AppTcp::open(src, dst, self.rng.next_u32(), self.clock.now_ns());
        let mut conn = AppConn { tcp };
        self.write(&conn.tcp, vec![syn])?;
        self.pump_until(&mut conn, |t| t.phase != AppPhase::SynSent, timeout)?;
        match conn.tcp.phase {
            AppPhase::Established => Ok(conn),
            AppPhase::Reset if conn.tcp.reset_by_peer => Err(ClientError::Refused),
            _ => Err(ClientError::Timeout),
        }
    }

    pub fn send(&mut self, conn: &mut AppConn, data: &[u8]) -> Result<(), ClientError> {
        let segs = conn.tcp.send(data, self.clock.now_ns());
        self.write(&conn.tcp, segs)
    }

    pub fn close(&mut self, conn: &mut AppConn) -> Result<(), ClientError> {
        let segs = conn.tcp.close(self.clock.now_ns());
        self.write(&conn.tcp, segs)
    }

    pub fn reset(&mut self, conn: &mut AppConn) -> Result<(), ClientError> {
        let segs = conn.tcp.reset(self.clock.now_ns());
        self.write(&conn.tcp, segs)
    }

    /// Drive the connection until `done` holds. Returns false on timeout.
    pub fn pump_until(
        &mut self,
        conn: &mut AppConn,
        mut done: impl FnMut(&AppTcp) -> bool,
        timeout: Duration,
    ) -> Result<bool, ClientError> {
        let deadline = self.clock.now_ns() + timeout.as_nanos() as u64;
        loop {
            if done(&conn.tcp) {
                return Ok(true);
            }
            let now = self.clock.now_ns();
            if now >= deadline {
                return Ok(false);
            }
            if conn.tcp.phase == AppPhase::Reset {
                return Err(ClientError::Reset);
            }
            let wake = conn.tcp.deadline.map_or(deadline, |d| d.min(deadline));
            match self.chan.read_packet(Some(Duration::from_nanos(wake.saturating_sub(now))))? {
                Some(raw) => {
                    let Ok(ip) = parse_ipv4(&raw) else { continue };
                    let Ok(seg) = parse_tcp(&ip) else { continue };
                    let k = conn.tcp.key;
                    if ip.src_addr != k.dst_addr || seg.src_port != k.dst_port || seg.dst_port != k.src_port {
                        continue;
                    }
                    let segs = conn.tcp.on_segment(&seg, self.clock.now_ns());
                    self.write(&conn.tcp, segs)?;
                }
                None => {
                    let segs = conn.tcp.on_timer(self.clock.now_ns());
                    self.write(&conn.tcp, segs)?;
                }
            }
        }
    }

    /// Wait until the connection has received `until_len` bytes in total.
    pub fn recv(&mut self, conn: &mut AppConn, until_len: usize, timeout: Duration) -> Result<bool, ClientError> {
        self.pump_until(conn, |t| t.received.len() >= until_len, timeout)
    }
}
