//! [`Upstream`] backed by real sockets, one worker thread per connection.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, SocketAddrV4, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::{Upstream, UpstreamEvent};
use crate::clock::Clock;
use crate::rtt::{time_connect, ConnectOutcome, Connector, RttError};
use crate::FlowId;

enum Cmd {
    Data(Vec<u8>),
    ShutdownWrite,
    Close,
}

#[derive(Default)]
struct ConnShared {
    backlog: AtomicUsize,
    paused: AtomicBool,
    canceled: AtomicBool,
    stream: Mutex<Option<TcpStream>>,
}

impl ConnShared {
    fn cancel(&self) {
        self.canceled.store(true, Ordering::Release);
        if let Some(s) = self.stream.lock().unwrap().as_ref() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    fn canceled(&self) -> bool {
        self.canceled.load(Ordering::Acquire)
    }
}

struct TcpHandle {
    cmds: Sender<Cmd>,
    shared: Arc<ConnShared>,
}

struct UdpHandle {
    sock: Arc<UdpSocket>,
    closed: Arc<AtomicBool>,
}

pub struct SocketUpstream<C> {
    connector: C,
    clock: Arc<dyn Clock>,
    events: Sender<UpstreamEvent>,
    tcp: HashMap<FlowId, TcpHandle>,
    udp: HashMap<FlowId, UdpHandle>,
    /// Interface external datagram sockets bind to.
    pub bind_device: Option<String>,
}

impl<C> SocketUpstream<C>
where
    C: Connector<Stream = TcpStream> + Clone + Send + 'static,
{
    /// Returns the upstream and the receiver its events arrive on.
    pub fn new(connector: C, clock: Arc<dyn Clock>) -> (Self, Receiver<UpstreamEvent>) {
        let (tx, rx) = unbounded();
        (
            SocketUpstream { connector, clock, events: tx, tcp: HashMap::new(), udp: HashMap::new(), bind_device: None },
            rx,
        )
    }

    fn udp_socket(&self, target: SocketAddrV4) -> std::io::Result<UdpSocket> {
        let sock = socket2::Socket::new(socket2::Domain::IPV4, socket2::Type::DGRAM, Some(socket2::Protocol::UDP))?;
        #[cfg(any(target_os = "linux", target_os = "android"))]
        if let Some(dev) = &self.bind_device {
            sock.bind_device(Some(dev.as_bytes()))?;
        }
        sock.bind(&SocketAddr::from(([0, 0, 0, 0], 0)).into())?;
        sock.connect(&SocketAddr::V4(target).into())?;
        Ok(sock.into())
    }
}

#[allow(clippy::too_many_arguments)]
fn connection_worker<C: Connector<Stream = TcpStream>>(
    id: FlowId,
    mut connector: C,
    dst: SocketAddrV4,
    timeout: Duration,
    clock: Arc<dyn Clock>,
    shared: Arc<ConnShared>,
    cmds: Receiver<Cmd>,
    events: Sender<UpstreamEvent>,
) {
    let (stream, outcome, t_start, t_end) = match time_connect(&mut connector, dst, timeout, &*clock) {
        Ok(t) => (t.stream, t.outcome, t.t_start, t.t_end),
        Err(RttError::ClockRegression { start, end }) => (None, ConnectOutcome::Unreachable, start, end),
    };
    if shared.canceled() {
        return;
    }
    let _ = events.send(UpstreamEvent::ConnectDone { id, outcome, t_start, t_end });
    let Some(stream) = stream else { return };
    let _ = stream.set_nodelay(true);
    let (reader, mut writer) = match (stream.try_clone(), stream.try_clone()) {
        (Ok(r), Ok(w)) => (r, w),
        _ => {
            let _ = events.send(UpstreamEvent::IoError { id });
            return;
        }
    };
    *shared.stream.lock().unwrap() = Some(stream);
    if shared.canceled() {
        let _ = writer.shutdown(Shutdown::Both);
        return;
    }
    let rshared = shared.clone();
    let revents = events.clone();
    let read_thread = thread::Builder::new()
        .name(format!("relay-read-{}", id.0))
        .spawn(move || read_loop(id, reader, rshared, revents));
    if read_thread.is_err() {
        let _ = events.send(UpstreamEvent::IoError { id });
        return;
    }
    for cmd in cmds {
        match cmd {
            Cmd::Data(bytes) => {
                let n = bytes.len();
                let res = writer.write_all(&bytes);
                shared.backlog.fetch_sub(n, Ordering::AcqRel);
                if res.is_err() {
                    if !shared.canceled() {
                        let _ = events.send(UpstreamEvent::IoError { id });
                    }
                    break;
                }
            }
            Cmd::ShutdownWrite => {
                let _ = writer.shutdown(Shutdown::Write);
            }
            Cmd::Close => break,
        }
    }
    let _ = writer.shutdown(Shutdown::Both);
}

fn read_loop(id: FlowId, mut stream: TcpStream, shared: Arc<ConnShared>, events: Sender<UpstreamEvent>) {
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        if shared.canceled() {
            return;
        }
        if shared.paused.load(Ordering::Acquire) {
            thread::sleep(Duration::from_millis(2));
            continue;
        }
        match stream.read(&mut buf) {
            Ok(0) => {
                if !shared.canceled() {
                    let _ = events.send(UpstreamEvent::PeerClosed { id });
                }
                return;
            }
            Ok(n) => {
                if shared.canceled() || events.send(UpstreamEvent::Data { id, data: buf[..n].to_vec() }).is_err() {
                    return;
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(_) => {
                if !shared.canceled() {
                    let _ = events.send(UpstreamEvent::IoError { id });
                }
                return;
            }
        }
    }
}

impl<C> Upstream for SocketUpstream<C>
where
    C: Connector<Stream = TcpStream> + Clone + Send + 'static,
{
    fn connect(&mut self, id: FlowId, dst: SocketAddrV4, timeout: Duration) {
        let (tx, rx) = unbounded();
        let shared = Arc::new(ConnShared::default());
        self.tcp.insert(id, TcpHandle { cmds: tx, shared: shared.clone() });
        let connector = self.connector.clone();
        let clock = self.clock.clone();
        let events = self.events.clone();
        let spawned = thread::Builder::new()
            .name(format!("relay-conn-{}", id.0))
            .spawn(move || connection_worker(id, connector, dst, timeout, clock, shared, rx, events));
        if spawned.is_err() {
            // local resource exhaustion: report a failed connect
            let now = self.clock.now_ns();
            let _ = self.events.send(UpstreamEvent::ConnectDone {
                id,
                outcome: ConnectOutcome::Unreachable,
                t_start: now,
                t_end: now,
            });
        }
    }

    fn send(&mut self, id: FlowId, data: Vec<u8>) {
        if let Some(h) = self.tcp.get(&id) {
            h.shared.backlog.fetch_add(data.len(), Ordering::AcqRel);
            let _ = h.cmds.send(Cmd::Data(data));
        }
    }

    fn shutdown_write(&mut self, id: FlowId) {
        if let Some(h) = self.tcp.get(&id) {
            let _ = h.cmds.send(Cmd::ShutdownWrite);
        }
    }

    fn close(&mut self, id: FlowId) {
        if let Some(h) = self.tcp.remove(&id) {
            h.shared.cancel();
            let _ = h.cmds.send(Cmd::Close);
        }
    }

    fn set_paused(&mut self, id: FlowId, paused: bool) {
        if let Some(h) = self.tcp.get(&id) {
            h.shared.paused.store(paused, Ordering::Release);
        }
    }

    fn backlog(&self, id: FlowId) -> usize {
        self.tcp.get(&id).map_or(0, |h| h.shared.backlog.load(Ordering::Acquire))
    }

    fn udp_send(&mut self, id: FlowId, dst: SocketAddrV4, data: Vec<u8>) {
        if !self.udp.contains_key(&id) {
            let sock = match self.udp_socket(self.connector.route(dst)) {
                Ok(s) => Arc::new(s),
                Err(e) => {
                    log::warn!("udp socket for {dst}: {e}");
                    return;
                }
            };
            let _ = sock.set_read_timeout(Some(Duration::from_millis(200)));
            let closed = Arc::new(AtomicBool::new(false));
            let (rsock, rclosed, events) = (sock.clone(), closed.clone(), self.events.clone());
            let spawned = thread::Builder::new().name(format!("relay-udp-{}", id.0)).spawn(move || {
                let mut buf = vec![0u8; 65536];
                while !rclosed.load(Ordering::Acquire) {
                    match rsock.recv(&mut buf) {
                        Ok(n) => {
                            if rclosed.load(Ordering::Acquire) {
                                return;
                            }
                            let _ = events.send(UpstreamEvent::UdpReply { id, data: buf[..n].to_vec() });
                        }
                        Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                        Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                        // e.g. ICMP port unreachable on a connected socket
                        Err(_) => {}
                    }
                }
            });
            if spawned.is_err() {
                return;
            }
            self.udp.insert(id, UdpHandle { sock, closed });
        }
        if let Err(e) = self.udp[&id].sock.send(&data) {
            log::debug!("udp send to {dst}: {e}");
        }
    }

    fn udp_close(&mut self, id: FlowId) {
        if let Some(h) = self.udp.remove(&id) {
            h.closed.store(true, Ordering::Release);
        }
    }
}

impl<C> Drop for SocketUpstream<C> {
    fn drop(&mut self) {
        for (_, h) in self.tcp.drain() {
            h.shared.cancel();
            let _ = h.cmds.send(Cmd::Close);
        }
        for (_, h) in self.udp.drain() {
            h.closed.store(true, Ordering::Release);
        }
    }
}
