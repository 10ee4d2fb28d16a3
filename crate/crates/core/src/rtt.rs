//! SYN-ACK round-trip measurement by timing connection establishment.
//!
//! [`time_connect`] reads the clock immediately before and after the
//! establishment call and does nothing else in between. The coarse baseline
//! meter, used only for comparison runs, reproduces three common sources of
//! error: connection-manager setup inside the timed window, timestamps taken
//! before that setup, and millisecond timestamp resolution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hint::black_box;
use std::io;
use std::net::{SocketAddr, SocketAddrV4, TcpStream};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::AppId;
use crate::clock::Clock;
use crate::packet::FlowKey;

/// Result of one establishment attempt, normalized across platforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConnectOutcome {
    Connected,
    Refused,
    Unreachable,
    Timeout,
}

impl ConnectOutcome {
    pub fn from_io_error(e: &io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::ConnectionRefused => ConnectOutcome::Refused,
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => ConnectOutcome::Timeout,
            _ => ConnectOutcome::Unreachable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SampleOutcome {
    Success,
    Timeout,
    Refused,
    Unreachable,
    Canceled,
}

impl From<ConnectOutcome> for SampleOutcome {
    fn from(o: ConnectOutcome) -> Self {
        match o {
            ConnectOutcome::Connected => SampleOutcome::Success,
            ConnectOutcome::Refused => SampleOutcome::Refused,
            ConnectOutcome::Unreachable => SampleOutcome::Unreachable,
            ConnectOutcome::Timeout => SampleOutcome::Timeout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RttSample {
    pub key: FlowKey,
    pub app: AppId,
    pub t_start: u64,
    pub t_end: u64,
    pub rtt_ns: u64,
    pub outcome: SampleOutcome,
    pub network_tag: String,
    pub wall_time: DateTime<Utc>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RttError {
    #[error("clock went backwards: start {start} ns, end {end} ns")]
    ClockRegression { start: u64, end: u64 },
}

/// Something that can open a connection, blocking until it is established
/// or has failed.
pub trait Connector {
    type Stream;

    fn connect(&mut self, dst: SocketAddrV4, timeout: Duration) -> Result<Self::Stream, ConnectOutcome>;

    /// Address actually dialed for `dst`. Also used for datagram sockets.
    fn route(&self, dst: SocketAddrV4) -> SocketAddrV4 {
        dst
    }
}

/// One timed establishment call.
#[derive(Debug)]
pub struct ConnectTiming<S> {
    pub stream: Option<S>,
    pub outcome: ConnectOutcome,
    pub t_start: u64,
    pub t_end: u64,
}

impl<S> ConnectTiming<S> {
    pub fn rtt_ns(&self) -> u64 {
        self.t_end - self.t_start
    }

    pub fn to_sample(&self, key: FlowKey, app: AppId, network_tag: &str, wall_time: DateTime<Utc>) -> RttSample {
        RttSample {
            key,
            app,
            t_start: self.t_start,
            t_end: self.t_end,
            rtt_ns: self.rtt_ns(),
            outcome: self.outcome.into(),
            network_tag: network_tag.to_string(),
            wall_time,
        }
    }
}

/// Time a single connect to `dst`.
pub fn time_connect<C: Connector + ?Sized>(
    connector: &mut C,
    dst: SocketAddrV4,
    timeout: Duration,
    clock: &dyn Clock,
) -> Result<ConnectTiming<C::Stream>, RttError> {
    let t_start = clock.now_ns();
    let result = connector.connect(dst, timeout);
    let t_end = clock.now_ns();
    timing(result, t_start, t_end)
}

fn timing<S>(result: Result<S, ConnectOutcome>, t_start: u64, t_end: u64) -> Result<ConnectTiming<S>, RttError> {
    if t_end < t_start {
        return Err(RttError::ClockRegression { start: t_start, end: t_end });
    }
    let (stream, outcome) = match result {
        Ok(s) => (Some(s), ConnectOutcome::Connected),
        Err(o) => (None, o),
    };
    Ok(ConnectTiming { stream, outcome, t_start, t_end })
}

/// Knobs for the coarse baseline meter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineConfig {
    /// Work done by the connection-manager layer before the socket call.
    pub pre_connect: Duration,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { pre_connect: Duration::from_millis(12) }
    }
}

fn floor_ms(ns: u64) -> u64 {
    ns / 1_000_000 * 1_000_000
}

/// Stand-in for an HTTP-client style connection manager: a connection
/// record, a socket option table and I/O buffers, built per request.
fn build_connection_manager(dst: SocketAddrV4) -> usize {
    let mut options = BTreeMap::new();
    options.insert("tcp_nodelay", 1u32);
    options.insert("so_keepalive", 1);
    options.insert("so_rcvbuf", 87_380);
    options.insert("so_sndbuf", 16_384);
    options.insert("so_timeout", 3_000);
    let recv = vec![0u8; 8192];
    let send = vec![0u8; 8192];
    let route = format!("{}:{}", dst.ip(), dst.port());
    black_box(options.len() + recv.len() + send.len() + route.len())
}

/// The degraded meter. Output has the same shape as [`time_connect`].
pub fn baseline_coarse_connect<C: Connector + ?Sized>(
    connector: &mut C,
    dst: SocketAddrV4,
    timeout: Duration,
    clock: &dyn Clock,
    cfg: BaselineConfig,
) -> Result<ConnectTiming<C::Stream>, RttError> {
    let t_start = floor_ms(clock.now_ns());
    black_box(build_connection_manager(dst));
    clock.sleep(cfg.pre_connect);
    let result = connector.connect(dst, timeout);
    let t_end = floor_ms(clock.now_ns());
    timing(result, t_start, t_end)
}

/// Nearest half millisecond, ties away from zero.
pub fn round_display(rtt_ns: u64) -> f64 {
    let halves = (rtt_ns + 250_000) / 500_000;
    halves as f64 * 0.5
}

/// Plain blocking TCP connector.
#[derive(Debug, Clone, Default)]
pub struct TcpConnector {
    /// Outbound interface to bind to, keeping relayed traffic off the tunnel.
    pub bind_device: Option<String>,
    /// Destination rewrites, for pointing traffic at local test servers.
    pub redirect: BTreeMap<SocketAddrV4, SocketAddrV4>,
}

impl TcpConnector {
    pub fn new() -> Self {
        Self::default()
    }

    fn dial(&self, target: SocketAddrV4, timeout: Duration) -> io::Result<TcpStream> {
        let sock = socket2::Socket::new(socket2::Domain::IPV4, socket2::Type::STREAM, Some(socket2::Protocol::TCP))?;
        #[cfg(any(target_os = "linux", target_os = "android"))]
        if let Some(dev) = &self.bind_device {
            sock.bind_device(Some(dev.as_bytes()))?;
        }
        sock.connect_timeout(&SocketAddr::V4(target).into(), timeout)?;
        Ok(sock.into())
    }
}

impl Connector for TcpConnector {
    type Stream = TcpStream;

    fn connect(&mut self, dst: SocketAddrV4, timeout: Duration) -> Result<TcpStream, ConnectOutcome> {
        self.dial(self.route(dst), timeout).map_err(|e| ConnectOutcome::from_io_error(&e))
    }

    fn route(&self, dst: SocketAddrV4) -> SocketAddrV4 {
        self.redirect.get(&dst).copied().unwrap_or(dst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Destination {
    pub label: String,
    pub addr: SocketAddrV4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub destination: String,
    pub reference_ms: f64,
    pub meter_ms: f64,
    pub delta_ms: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunPair {
    pub reference_ns: u64,
    pub meter_ns: u64,
}

impl RunPair {
    pub fn delta_ns(&self) -> u64 {
        self.meter_ns.abs_diff(self.reference_ns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeterKind {
    Direct,
    Baseline(BaselineConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub rows: Vec<ComparisonRow>,
    /// Successful runs per destination, in run order.
    pub runs: Vec<Vec<RunPair>>,
}

/// Measure every destination `runs` times and average against a reference.
///
/// `reference` yields the true handshake time for a destination and run
/// index: the scripted value in simulation, or a capture-derived SYN/SYN-ACK
/// gap. Failed attempts are left out of the means.
pub fn compare_accuracy<C: Connector + ?Sized>(
    connector: &mut C,
    clock: &dyn Clock,
    destinations: &[Destination],
    runs: usize,
    timeout: Duration,
    meter: MeterKind,
    reference: &mut dyn FnMut(&Destination, usize) -> Option<u64>,
) -> Result<AccuracyReport, RttError> {
    let runs = runs.max(1);
    let mut report = AccuracyReport { rows: Vec::new(), runs: Vec::new() };
    for dst in destinations {
        let mut pairs = Vec::with_capacity(runs);
        for run in 0..runs {
            let t = match meter {
                MeterKind::Direct => time_connect(connector, dst.addr, timeout, clock)?,
                MeterKind::Baseline(cfg) => baseline_coarse_connect(connector, dst.addr, timeout, clock, cfg)?,
            };
            if t.outcome != ConnectOutcome::Connected {
                continue;
            }
            if let Some(reference_ns) = reference(dst, run) {
                pairs.push(RunPair { reference_ns, meter_ns: t.rtt_ns() });
            }
        }
        let n = pairs.len();
        let mean = |f: fn(&RunPair) -> u64| {
            if n == 0 {
                f64::NAN
            } else {
                pairs.iter().map(|p| f(p) as u128).sum::<u128>() as f64 / n as f64 / 1e6
            }
        };
        let reference_ms = mean(|p| p.reference_ns);
        let meter_ms = mean(|p| p.meter_ns);
        report.rows.push(ComparisonRow {
            destination: format!("{} ({})", dst.label, dst.addr),
            reference_ms,
            meter_ms,
            delta_ms: (meter_ms - reference_ms).abs(),
            runs: n,
        });
        report.runs.push(pairs);
    }
    Ok(report)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.destination.len()).max().unwrap_or(0).max("destination".len());
    let mut out = format!(
        "{:<width$}  {:>12}  {:>10}  {:>10}  {:>4}\n",
        "destination", "reference_ms", "meter_ms", "delta_ms", "runs"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.3}  {:>10.3}  {:>10.3}  {:>4}",
            r.destination, r.reference_ms, r.meter_ms, r.delta_ms, r.runs
        );
    }
    out
}
