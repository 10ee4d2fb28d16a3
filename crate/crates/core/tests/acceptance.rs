//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

#[path = "support/utcp_table.rs"]
mod utcp_table;

use std::collections::{BTreeMap, BTreeSet};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relaymon::attribution::{AppId, NullResolver};
use relaymon::clock::{MonotonicClock, VirtualClock};
use relaymon::diag::{
    build_dns_query, build_dns_response, default_bogus_set, flag_misconfig, inspect_dns, FailureClass, FailureRecord,
    RecordContext,
};
use relaymon::packet::{internet_checksum, FlowKey, Transport};
use relaymon::relay::RelayConfig;
use relaymon::rtt::{compare_accuracy, BaselineConfig, Destination, MeterKind, RttSample, SampleOutcome};
use relaymon::sim::{
    audit_zero_injection, filler, loopback_overhead, ms_to_ns, random_scenario, run_scenario, Behavior, ClientAction,
    ClientOp, EndpointSpec, LoopbackRelay, LoopbackWorld, Scenario, ServerMode, ServerStep, SimConnector,
};
use relaymon::stats::{Event, StatsStore};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

const APP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);
const REFERENCE_MS: [f64; 3] = [4.26, 36.55, 284.85];
const WEIXIN: &str = "hkminorshort.weixin.qq.com";

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn addr(s: &str) -> SocketAddrV4 {
    s.parse().unwrap()
}

fn accept(rtt_ms: f64, mode: ServerMode) -> Behavior {
    Behavior::Accept { rtt_ms: Some(rtt_ms), one_way_ms: None, mode }
}

fn ep(a: SocketAddrV4, behavior: Behavior) -> EndpointSpec {
    EndpointSpec { addr: a, label: None, behavior }
}

fn reference_endpoints() -> Vec<EndpointSpec> {
    REFERENCE_MS
        .iter()
        .enumerate()
        .map(|(i, ms)| ep(SocketAddrV4::new(Ipv4Addr::new(198, 51, 100, i as u8 + 1), 443), accept(*ms, ServerMode::Echo)))
        .collect()
}

fn scenario(endpoints: Vec<EndpointSpec>, script: Vec<ClientAction>) -> Scenario {
    let mut s = Scenario::from_json(r#"{"endpoints": []}"#).unwrap();
    s.endpoints = endpoints;
    s.client_script = script;
    s
}

fn open(at: f64, flow: &str, dst: SocketAddrV4) -> ClientAction {
    ClientAction::at(at, ClientOp::Open { flow: flow.into(), dst, src_port: None })
}

fn relay(world: &LoopbackWorld) -> LoopbackRelay {
    let cfg = RelayConfig { network_tag: "loopback".into(), ..RelayConfig::default() };
    LoopbackRelay::start(cfg, world.connector(), Arc::new(NullResolver)).unwrap()
}

fn samples(store: &StatsStore) -> Vec<RttSample> {
    store
        .events()
        .into_iter()
        .filter_map(|r| match r.event {
            Event::Sample(s) => Some(s),
            _ => None,
        })
        .collect()
}

fn sha(b: &[u8]) -> Vec<u8> {
    Sha256::digest(b).to_vec()
}

fn accuracy() -> Outcome {
    // virtual clock: the relay's sample must equal the scripted handshake
    let eps = reference_endpoints();
    let script = eps.iter().enumerate().map(|(i, e)| open(i as f64, &format!("f{i}"), e.addr)).collect();
    let b = run_scenario(&scenario(eps.clone(), script)).map_err(|e| e.to_string())?;
    for (i, ms) in REFERENCE_MS.iter().enumerate() {
        let s = b.sample_for(&format!("f{i}")).ok_or("missing sample")?;
        ensure!(s.rtt_ns == ms_to_ns(*ms), "sim relay measured {} ns for {ms} ms", s.rtt_ns);
    }
    ensure!(b.oracle.iter().all(|o| o.error_ns() == Some(0)), "oracle mismatch {:?}", b.oracle);

    let clock = VirtualClock::new();
    let mut conn = SimConnector::new(clock.clone(), &eps);
    let dests: Vec<Destination> = eps.iter().map(|e| Destination { label: "ref".into(), addr: e.addr }).collect();
    let handshake: BTreeMap<SocketAddrV4, u64> = eps.iter().map(|e| (e.addr, e.behavior.handshake_ns().unwrap())).collect();
    let rep = compare_accuracy(&mut conn, &clock, &dests, 10, Duration::from_secs(3), MeterKind::Direct, &mut |d, _| {
        handshake.get(&d.addr).copied()
    })
    .map_err(|e| e.to_string())?;
    for pairs in &rep.runs {
        ensure!(pairs.len() == 10 && pairs.iter().all(|p| p.delta_ns() == 0), "virtual direct meter off: {pairs:?}");
    }

    // real loopback through the live relay
    let world = LoopbackWorld::start(&eps).map_err(|e| e.to_string())?;
    let r = relay(&world);
    let mut client = r.client(APP, 7);
    let t0 = Instant::now();
    for e in &eps {
        for _ in 0..10 {
            let mut c = client.connect(e.addr, Duration::from_secs(3)).map_err(|e| e.to_string())?;
            client.reset(&mut c).map_err(|e| e.to_string())?;
        }
    }
    let store = r.stats().clone();
    drop(r);
    let all = samples(&store);
    let mut detail = Vec::new();
    for (e, ms) in eps.iter().zip(REFERENCE_MS) {
        let rtts: Vec<f64> =
            all.iter().filter(|s| s.key.dst() == e.addr && s.outcome == SampleOutcome::Success).map(|s| s.rtt_ns as f64 / 1e6).collect();
        ensure!(rtts.len() == 10, "{} samples for {}", rtts.len(), e.addr);
        let mean = rtts.iter().sum::<f64>() / 10.0;
        let bound = if ms > 100.0 { 2.0 } else { 1.0 };
        ensure!((mean - ms).abs() <= bound, "loopback mean {mean:.3} ms vs {ms} ms");
        detail.push(format!("{ms}->{mean:.3}"));
    }
    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("virtual exact; loopback mean-of-10 ms {}", detail.join(" ")))
}

fn baseline_degradation() -> Outcome {
    let eps = reference_endpoints();
    let world = LoopbackWorld::start(&eps).map_err(|e| e.to_string())?;
    let clock = MonotonicClock::new();
    let dests: Vec<Destination> = eps.iter().map(|e| Destination { label: "ref".into(), addr: e.addr }).collect();
    let handshake: BTreeMap<SocketAddrV4, u64> = eps.iter().map(|e| (e.addr, e.behavior.handshake_ns().unwrap())).collect();
    let mut reference = |d: &Destination, _| handshake.get(&d.addr).copied();
    let timeout = Duration::from_secs(3);
    let direct = compare_accuracy(&mut world.connector(), &clock, &dests, 10, timeout, MeterKind::Direct, &mut reference)
        .map_err(|e| e.to_string())?;
    let baseline = MeterKind::Baseline(BaselineConfig { pre_connect: Duration::from_millis(12) });
    let coarse = compare_accuracy(&mut world.connector(), &clock, &dests, 10, timeout, baseline, &mut reference)
        .map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    for (i, (d, c)) in direct.runs.iter().zip(&coarse.runs).enumerate() {
        ensure!(d.len() == 10 && c.len() == 10, "destination {i}: {} / {} runs", d.len(), c.len());
        let wins = d.iter().zip(c).filter(|(d, c)| c.delta_ns() > d.delta_ns()).count();
        ensure!(wins >= 9, "destination {i}: baseline worse in only {wins}/10");
        detail.push(format!("{}/10 (direct {:.3} ms, baseline {:.3} ms)", wins, direct.rows[i].delta_ms, coarse.rows[i].delta_ms));
    }
    Ok(detail.join("; "))
}

fn timeout_classification() -> Outcome {
    let hole = addr("192.0.2.99:80");
    let b = run_scenario(&scenario(vec![ep(hole, Behavior::Blackhole)], vec![open(0.0, "f", hole)])).map_err(|e| e.to_string())?;
    let s = b.sample_for("f").ok_or("no sample")?;
    ensure!(s.outcome == SampleOutcome::Timeout && s.rtt_ns == 3_000_000_000, "virtual: {:?} {} ns", s.outcome, s.rtt_ns);
    ensure!(b.failures.len() == 1 && b.failures[0].class == FailureClass::Timeout, "virtual failures {:?}", b.failures);

    let world = LoopbackWorld::start(&[ep(hole, Behavior::Blackhole)]).map_err(|e| e.to_string())?;
    let r = relay(&world);
    let mut client = r.client(APP, 3);
    let _ = client.connect(hole, Duration::from_secs(5));
    let store = r.stats().clone();
    drop(r);
    let all = samples(&store);
    ensure!(all.len() == 1, "{} real samples", all.len());
    let ms = all[0].rtt_ns as f64 / 1e6;
    ensure!(all[0].outcome == SampleOutcome::Timeout && (3000.0..=3100.0).contains(&ms), "real: {:?} {ms} ms", all[0].outcome);
    let view = store.all_app_view();
    ensure!(view[0].failures.get("TIMEOUT") == Some(&1), "real failures {:?}", view[0].failures);
    Ok(format!("virtual 3000 ms exact, real {ms:.1} ms"))
}

fn dns_misconfig() -> Outcome {
    let ctx = RecordContext {
        key: FlowKey::new(Transport::Udp, SocketAddrV4::new(APP, 5353), addr("8.8.8.8:53")),
        app: AppId::new("WeChat"),
        wall_time: Utc.timestamp_opt(1_500_000_000, 0).unwrap(),
    };
    let bogus = default_bogus_set();
    let crafted = build_dns_response(&build_dns_query(1, WEIXIN), &[Ipv4Addr::new(1, 1, 1, 1)]).unwrap();
    let rec = flag_misconfig(&inspect_dns(&crafted).map_err(|e| e.to_string())?, &bogus, &ctx).ok_or("crafted answer not flagged")?;
    ensure!(rec.class == FailureClass::DnsMisconfig && rec.evidence.contains(WEIXIN), "record {rec:?}");
    let legit = build_dns_response(&build_dns_query(2, WEIXIN), &[Ipv4Addr::new(203, 205, 219, 57)]).unwrap();
    ensure!(flag_misconfig(&inspect_dns(&legit).unwrap(), &bogus, &ctx).is_none(), "legitimate answer flagged");

    // through the relay
    let dns = addr("8.8.8.8:53");
    let query = |at: f64, q: &str| ClientAction::at(at, ClientOp::Udp { dst: dns, src_port: None, dns_query: Some(q.into()), text: None, len: None });
    let mut bad = BTreeMap::new();
    bad.insert(WEIXIN.to_string(), vec![Ipv4Addr::new(1, 1, 1, 1)]);
    bad.insert("example.com".to_string(), vec![Ipv4Addr::new(93, 184, 216, 34)]);
    let b = run_scenario(&scenario(
        vec![ep(dns, Behavior::Dns { rtt_ms: 5.0, records: bad })],
        vec![query(0.0, WEIXIN), query(10.0, "example.com")],
    ))
    .map_err(|e| e.to_string())?;
    let hits: Vec<&FailureRecord> = b.failures.iter().filter(|f| f.class == FailureClass::DnsMisconfig).collect();
    ensure!(hits.len() == 1 && hits[0].evidence.contains(WEIXIN), "relay produced {hits:?}");
    let mut good = BTreeMap::new();
    good.insert(WEIXIN.to_string(), vec![Ipv4Addr::new(203, 205, 219, 57)]);
    let b = run_scenario(&scenario(vec![ep(dns, Behavior::Dns { rtt_ms: 5.0, records: good })], vec![query(0.0, WEIXIN)]))
        .map_err(|e| e.to_string())?;
    ensure!(b.failures.is_empty(), "legitimate run produced {:?}", b.failures);
    Ok(format!("one record: {}", hits[0].evidence))
}

fn zero_injection() -> Outcome {
    let mut external = 0;
    for seed in 0..100 {
        let b = run_scenario(&random_scenario(seed)).map_err(|e| format!("seed {seed}: {e}"))?;
        let rep = audit_zero_injection(&b);
        ensure!(rep.passed(), "seed {seed}: {:?}", rep.violations);
        external += rep.external_records;
    }
    Ok(format!("100 seeds, {external} external records all traced to the client script"))
}

fn utcp_conservation() -> Outcome {
    let table = utcp_table::load_table();
    let states: BTreeSet<&String> = table.keys().map(|(s, _)| s).collect();
    ensure!(table.len() == states.len() * utcp_table::SYMBOLS.len(), "table has {} rows", table.len());
    let mut covered = BTreeSet::new();
    for seed in 0..1000 {
        utcp_table::run_seed(seed, &table, &mut covered);
    }
    ensure!(covered.len() == table.len(), "{} of {} rows exercised", covered.len(), table.len());
    Ok(format!("1000 seeds, all {} table rows exercised", table.len()))
}

fn relay_fidelity() -> Outcome {
    let mib = 1 << 20;
    let echo = addr("198.51.100.9:7");
    let script = vec![
        open(0.0, "f", echo),
        ClientAction::at(0.0, ClientOp::Send { flow: "f".into(), len: Some(mib), text: None }),
        ClientAction::at(5000.0, ClientOp::Close { flow: "f".into() }),
    ];
    let b = run_scenario(&scenario(vec![ep(echo, accept(10.0, ServerMode::Echo))], script)).map_err(|e| e.to_string())?;
    let (sent, received) = &b.app_streams["f"];
    let id = b.flow_trace("f").ok_or("no trace")?.id;
    ensure!(sent.len() == mib && sha(sent) == sha(received) && sha(&b.server_rx[&id]) == sha(sent), "sim echo mismatch");
    ensure!(b.app("f").is_some_and(|a| a.peer_fin && a.acked_all), "sim close incomplete");

    let half = addr("198.51.100.10:80");
    let steps = vec![ServerStep::SendText("bye".into()), ServerStep::Close];
    let script = vec![
        open(0.0, "h", half),
        ClientAction::at(100.0, ClientOp::Send { flow: "h".into(), len: Some(300), text: None }),
        ClientAction::at(200.0, ClientOp::Close { flow: "h".into() }),
    ];
    let b = run_scenario(&scenario(vec![ep(half, accept(10.0, ServerMode::Script(steps.clone())))], script)).map_err(|e| e.to_string())?;
    let id = b.flow_trace("h").ok_or("no trace")?.id;
    ensure!(b.app_streams["h"].1 == b"bye" && b.server_rx[&id].len() == 300, "sim half-close lost data");
    ensure!(b.app("h").is_some_and(|a| a.peer_fin && a.acked_all), "sim half-close did not finish");

    let world = LoopbackWorld::start(&[ep(echo, accept(0.0, ServerMode::Echo)), ep(half, accept(0.0, ServerMode::Script(steps)))])
        .map_err(|e| e.to_string())?;
    let r = relay(&world);
    let mut client = r.client(APP, 11);
    let mut c = client.connect(echo, Duration::from_secs(3)).map_err(|e| e.to_string())?;
    let data = filler(77, mib);
    client.send(&mut c, &data).map_err(|e| e.to_string())?;
    client.close(&mut c).map_err(|e| e.to_string())?;
    let done = client.pump_until(&mut c, |t| t.is_done(), Duration::from_secs(60)).map_err(|e| e.to_string())?;
    ensure!(done && sha(&c.tcp.received) == sha(&data), "loopback echo: done={done} got {} bytes", c.tcp.received.len());

    let mut h = client.connect(half, Duration::from_secs(3)).map_err(|e| e.to_string())?;
    let fin = client.pump_until(&mut h, |t| t.peer_fin, Duration::from_secs(5)).map_err(|e| e.to_string())?;
    ensure!(fin && h.tcp.received == b"bye", "loopback half-close: fin={fin}");
    client.send(&mut h, b"after fin").map_err(|e| e.to_string())?;
    client.close(&mut h).map_err(|e| e.to_string())?;
    let done = client.pump_until(&mut h, |t| t.is_done(), Duration::from_secs(5)).map_err(|e| e.to_string())?;
    ensure!(done, "loopback half-close did not finish");
    Ok("1 MiB echo identical in sim and loopback; half-close both ways".into())
}

/// Word-by-word sum with a wide accumulator.
fn naive_checksum(data: &[u8]) -> u16 {
    let mut sum: u64 = 0;
    for chunk in data.chunks(2) {
        sum += (chunk[0] as u64) << 8 | chunk.get(1).copied().unwrap_or(0) as u64;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn checksum() -> Outcome {
    let v = internet_checksum(&[0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7]);
    ensure!(v == 0x220d, "fixed vector gave {v:#06x}");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000 {
        let mut buf = vec![0u8; rng.gen_range(0..1600)];
        rng.fill(&mut buf[..]);
        ensure!(internet_checksum(&buf) == naive_checksum(&buf), "buffer {i} disagrees");
    }
    Ok("0x220d and 1000 random buffers".into())
}

fn sample(app: &str, dst: u8, rtt_ns: u64, tag: &str) -> RttSample {
    RttSample {
        key: FlowKey::new(Transport::Tcp, SocketAddrV4::new(APP, 40000), SocketAddrV4::new(Ipv4Addr::new(93, 184, 216, dst), 443)),
        app: AppId::new(app),
        t_start: 0,
        t_end: rtt_ns,
        rtt_ns,
        outcome: SampleOutcome::Success,
        network_tag: tag.into(),
        wall_time: Utc.timestamp_opt(1_500_000_000, 0).unwrap(),
    }
}

fn aggregation(store: &StatsStore) -> Outcome {
    let apps = ["chrome", "WeChat", "Facebook", "Instagram"];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let s = sample(apps[rng.gen_range(0..4)], rng.gen_range(1..6), rng.gen_range(1_000_000..500_000_000), if rng.gen() { "wifi" } else { "4g" });
        store.record_sample(s).map_err(|e| e.to_string())?;
    }
    let mut brute: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for r in store.events() {
        if let Event::Sample(s) = r.event {
            brute.entry(s.app.name.clone()).or_default().push(s.rtt_ns);
        }
    }
    for a in store.all_app_view() {
        let v = &brute[&a.app.name];
        let mean = (v.iter().map(|&x| x as u128).sum::<u128>() / v.len() as u128) as u64;
        ensure!(a.conn_count == v.len() as u64 && a.success_count == v.len() as u64, "{} counts", a.app);
        ensure!(a.min_ns == v.iter().min().copied() && a.max_ns == v.iter().max().copied(), "{} min/max", a.app);
        ensure!(a.mean_ns == Some(mean), "{} mean {:?} vs {mean}", a.app, a.mean_ns);
    }

    let reference = StatsStore::new();
    for ms in [37.0, 37.0, 38.5] {
        reference.record_sample(sample("chrome", 1, (ms * 1e6) as u64, "wifi")).unwrap();
    }
    let a = reference.app_view("chrome").unwrap();
    ensure!(
        (a.min_ns, a.max_ns, a.mean_ns) == (Some(37_000_000), Some(38_500_000), Some(37_500_000)),
        "reference rows gave {:?}/{:?}/{:?}",
        a.min_ns,
        a.max_ns,
        a.mean_ns
    );
    Ok("10^4 samples match recomputation; {37, 37, 38.5} -> 37 / 38.5 / 37.5".into())
}

fn overhead() -> Outcome {
    let rep = loopback_overhead(30, Duration::from_secs(3)).map_err(|e| e.to_string())?;
    let hs = rep.row("handshake").ok_or("no handshake row")?;
    let data = rep.row("data").ok_or("no data row")?;
    let fmt = |r: &relaymon::sim::OverheadRow| {
        format!(
            "{} median {:.3} ms, mean {:.3} ms (95% CI {:.3}..{:.3})",
            r.path, r.overhead.median_ms, r.overhead.mean_ms, r.overhead.ci95_ms.0, r.overhead.ci95_ms.1
        )
    };
    let line = format!("{}; {}", fmt(hs), fmt(data));
    ensure!(hs.overhead.median_ms < 10.0 && data.overhead.median_ms < 5.0, "{line}");
    Ok(line)
}

fn structural(dns_ok: bool, agg_ok: bool, store: &StatsStore) -> Outcome {
    ensure!(dns_ok && agg_ok, "depends on criteria 4 and 9");
    for tag in [None, Some("wifi"), Some("4g")] {
        let pts = store.export_cdf(None, tag).map_err(|e| e.to_string())?;
        ensure!(pts.last().map(|p| p.1) == Some(1.0), "final fraction {:?}", pts.last());
        ensure!(pts.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1), "cdf not monotone");
    }
    Ok("criteria 4 and 9 pass; CDF exports monotone and end at 1.0".into())
}

fn run(n: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = t0.elapsed().as_secs_f64();
    match &res {
        Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1}s]"),
    }
    res.is_ok()
}

fn main() {
    let mut ok = Vec::new();
    ok.push(run(1, "accuracy bound", accuracy));
    ok.push(run(2, "baseline degradation", baseline_degradation));
    ok.push(run(3, "timeout classification", timeout_classification));
    let dns = run(4, "dns misconfiguration", dns_misconfig);
    ok.push(dns);
    ok.push(run(5, "zero-injection audit", zero_injection));
    ok.push(run(6, "tcp state machine conservation", utcp_conservation));
    ok.push(run(7, "relay fidelity", relay_fidelity));
    ok.push(run(8, "checksum oracle", checksum));
    let store = StatsStore::new();
    let agg = run(9, "aggregation oracle", || aggregation(&store));
    ok.push(agg);
    ok.push(run(10, "overhead", overhead));
    ok.push(run(11, "structural coverage", || structural(dns, agg, &store)));
    let passed = ok.iter().filter(|x| **x).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
