//! How much delay the relay adds, measured directly and through the relay.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::{Data, Median};

use super::connector::SimConnector;
use super::loopback::{LoopbackRelay, LoopbackWorld};
use super::scenario::{Behavior, ClientAction, ClientOp, EndpointSpec, Scenario, ServerMode};
use super::{run_scenario, SimError};
use crate::attribution::NullResolver;
use crate::clock::{MonotonicClock, VirtualClock};
use crate::relay::RelayConfig;
use crate::rtt::time_connect;

const PROBE: &[u8] = b"0123456789abcdef0123456789abcdef0123456789abcdef0123456789abcdef";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// 95% confidence interval of the mean (Student t).
    pub ci95_ms: (f64, f64),
}

pub fn summarize(ms: &[f64]) -> Summary {
    let n = ms.len();
    if n == 0 {
        return Summary { n, mean_ms: f64::NAN, median_ms: f64::NAN, ci95_ms: (f64::NAN, f64::NAN) };
    }
    let mean = ms.iter().sum::<f64>() / n as f64;
    let median = Data::new(ms.to_vec()).median();
    if n < 2 {
        return Summary { n, mean_ms: mean, median_ms: median, ci95_ms: (mean, mean) };
    }
    let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid degrees of freedom").inverse_cdf(0.975);
    let half = t * (var / n as f64).sqrt();
    Summary { n, mean_ms: mean, median_ms: median, ci95_ms: (mean - half, mean + half) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadRow {
    /// "handshake" or "data".
    pub path: &'static str,
    pub direct: Summary,
    pub relayed: Summary,
    /// Per-run relayed minus direct.
    pub overhead: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub destination: SocketAddrV4,
    pub runs: usize,
    pub rows: Vec<OverheadRow>,
}

impl OverheadReport {
    pub fn row(&self, path: &str) -> Option<&OverheadRow> {
        self.rows.iter().find(|r| r.path == path)
    }

    pub fn render(&self) -> String {
        let mut s = format!("destination {} over {} runs\n", self.destination, self.runs);
        let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10} {:>10} {:>22}", "path", "direct", "relayed", "overhead", "median", "95% CI");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3} .. {:>8.3}",
                r.path, r.direct.mean_ms, r.relayed.mean_ms, r.overhead.mean_ms, r.overhead.median_ms, r.overhead.ci95_ms.0, r.overhead.ci95_ms.1
            );
        }
        s
    }
}

fn row(path: &'static str, direct: &[f64], relayed: &[f64]) -> OverheadRow {
    let diff: Vec<f64> = relayed.iter().zip(direct).map(|(r, d)| r - d).collect();
    OverheadRow { path, direct: summarize(direct), relayed: summarize(relayed), overhead: summarize(&diff) }
}

fn ns_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

fn first_accepting(endpoints: &[EndpointSpec]) -> Option<&EndpointSpec> {
    endpoints.iter().find(|e| matches!(e.behavior, Behavior::Accept { mode: ServerMode::Echo, .. }))
}

/// Virtual-clock comparison against the scenario's first echoing endpoint.
/// The relay itself costs no virtual time, so only the tunnel delay shows.
pub fn overhead_experiment(s: &Scenario, runs: usize) -> Result<OverheadReport, SimError> {
    s.validate()?;
    let ep = first_accepting(&s.endpoints)
        .ok_or_else(|| SimError::ScenarioInvalid("no echoing accept endpoint to measure".into()))?;
    let rtt = ep.behavior.handshake_ns().unwrap_or(0);
    let (mut dh, mut rh, mut dd, mut rd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..runs {
        let clock = VirtualClock::new();
        let mut conn = SimConnector::new(clock.clone(), &s.endpoints);
        let direct = time_connect(&mut conn, ep.addr, s.timeout(), &clock)
            .map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
        if direct.stream.is_none() {
            continue;
        }
        let mut one = s.clone();
        one.seed = s.seed.wrapping_add(i as u64);
        one.client_script = vec![
            ClientAction::at(0.0, ClientOp::Open { flow: "probe".into(), dst: ep.addr, src_port: None }),
            ClientAction::at(0.0, ClientOp::Send { flow: "probe".into(), len: Some(PROBE.len()), text: None }),
        ];
        let b = run_scenario(&one)?;
        let app = b.app("probe").expect("probe flow exists");
        let (Some(hs), Some(rx)) = (app.handshake_ns, app.last_rx_ns) else { continue };
        dh.push(ns_ms(direct.rtt_ns()));
        rh.push(ns_ms(hs));
        dd.push(ns_ms(rtt));
        // the probe opens at t=0 and its data leaves with the handshake ACK
        rd.push(ns_ms(rx - hs));
    }
    Ok(OverheadReport { destination: ep.addr, runs, rows: vec![row("handshake", &dh, &rh), row("data", &dd, &rd)] })
}

/// Real-clock comparison on 127.0.0.1: a local echo server reached directly
/// and through a live relay.
pub fn loopback_overhead(runs: usize, timeout: Duration) -> Result<OverheadReport, SimError> {
    let external = SocketAddrV4::new(Ipv4Addr::new(203, 0, 113, 7), 7);
    let world = LoopbackWorld::start(&[EndpointSpec {
        addr: external,
        label: Some("echo".into()),
        behavior: Behavior::Accept { rtt_ms: Some(0.0), one_way_ms: None, mode: ServerMode::Echo },
    }])?;
    let clock = MonotonicClock::new();
    let cfg = RelayConfig { connect_timeout: timeout, network_tag: "loopback".into(), ..RelayConfig::default() };
    let relay = LoopbackRelay::start(cfg, world.connector(), Arc::new(NullResolver))?;
    let mut client = relay.client(Ipv4Addr::new(10, 0, 0, 2), 1);
    let lo = |e: String| SimError::Loopback(e);
    let (mut dh, mut rh, mut dd, mut rd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut direct_conn = world.connector();
    for _ in 0..runs {
        let t = time_connect(&mut direct_conn, external, timeout, &clock).map_err(|e| lo(e.to_string()))?;
        let mut stream = t.stream.ok_or_else(|| lo(format!("direct connect: {:?}", t.outcome)))?;
        dh.push(ns_ms(t.t_end - t.t_start));
        stream.set_nodelay(true).map_err(|e| lo(e.to_string()))?;
        let mut back = [0u8; PROBE.len()];
        let t0 = Instant::now();
        stream.write_all(PROBE).and_then(|_| stream.read_exact(&mut back)).map_err(|e| lo(e.to_string()))?;
        dd.push(t0.elapsed().as_secs_f64() * 1e3);
        drop(stream);

        let mut conn = client.connect(external, timeout).map_err(|e| lo(format!("relayed connect: {e}")))?;
        rh.push(ns_ms(conn.tcp.handshake_ns().expect("connected")));
        let t0 = Instant::now();
        client.send(&mut conn, PROBE).map_err(|e| lo(e.to_string()))?;
        if !client.recv(&mut conn, PROBE.len(), timeout).map_err(|e| lo(e.to_string()))? {
            return Err(lo("relayed echo timed out".into()));
        }
        rd.push(t0.elapsed().as_secs_f64() * 1e3);
        client.close(&mut conn).map_err(|e| lo(e.to_string()))?;
        let _ = client.pump_until(&mut conn, |t| t.is_done(), Duration::from_millis(500));
    }
    drop(relay);
    Ok(OverheadReport { destination: external, runs, rows: vec![row("handshake", &dh, &rh), row("data", &dd, &rd)] })
}
