use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddrV4;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use relaymon::attribution::{platform_resolver, AttributionResolver, MapResolver, NullResolver};
use relaymon::clock::{Clock, MonotonicClock, VirtualClock};
use relaymon::net_io::{handshake_rtts, open_tunnel, CaptureReader, HandshakeReport};
use relaymon::relay::{LiveRelay, Relay, RelayConfig};
use relaymon::rtt::{
    comparison_table, compare_accuracy, round_display, AccuracyReport, BaselineConfig, ComparisonRow, Connector,
    Destination, MeterKind, SampleOutcome, TcpConnector,
};
use relaymon::sim::{
    audit_zero_injection, loopback_overhead, overhead_experiment, run_scenario, Behavior, LoopbackWorld, Scenario,
    SimConnector, TraceBundle,
};
use relaymon::stats::{app_stats_csv, cdf_csv, render_all_app_view, render_app_view, AppStats, Event, StatsStore};
use serde_json::json;

use crate::{Cli, CliError, Command, CompareArgs, Format, ReplayArgs, ReportArgs, ResolverSpec, RunArgs, SimulateArgs};

type CmdResult = Result<(), CliError>;

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    let handler = on_signal as extern "C" fn(libc::c_int) as libc::sighandler_t;
    // SAFETY: the handler only stores to an atomic, which is async-signal-safe
    unsafe {
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

pub fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Run(a) => run(cli, a),
        Command::Replay(a) => Ok(replay(cli, a)?),
        Command::Simulate(a) => Ok(simulate(cli, a)?),
        Command::Compare(a) => Ok(compare(cli, a)?),
        Command::Report(a) => Ok(report(cli, a)?),
    }
}

fn stdout_or(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit(out: &mut dyn Write, text: &str) -> anyhow::Result<()> {
    out.write_all(text.as_bytes())?;
    if !text.ends_with('\n') {
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn resolver(spec: &ResolverSpec) -> anyhow::Result<Arc<dyn AttributionResolver>> {
    Ok(match spec {
        ResolverSpec::Platform => Arc::from(platform_resolver()),
        ResolverSpec::None => Arc::new(NullResolver),
        ResolverSpec::Map(p) => {
            Arc::new(MapResolver::from_file(p).with_context(|| format!("loading app map {}", p.display()))?)
        }
    })
}

fn render_view(view: &[AppStats], format: Format) -> anyhow::Result<String> {
    Ok(match format {
        Format::Text => render_all_app_view(view),
        Format::Json => serde_json::to_string_pretty(view)?,
        Format::Csv => app_stats_csv(view),
    })
}

fn run(cli: &Cli, a: &RunArgs) -> CmdResult {
    let c = &cli.common;
    let store_path = c.store.as_ref().expect("validated");
    let resolver = resolver(&c.resolver)?;
    let (store, loaded) = StatsStore::open_append(store_path).with_context(|| format!("opening {}", store_path.display()))?;
    if loaded.corrupt > 0 {
        log::warn!("{}: skipped {} corrupt lines", store_path.display(), loaded.corrupt);
    }
    let cfg = RelayConfig {
        connect_timeout: Duration::from_millis(c.timeout_ms),
        strict_checksums: c.strict_checksums,
        network_tag: c.network_tag.clone(),
        max_flows: a.max_flows,
        ..RelayConfig::default()
    };
    let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new());
    let relay = Relay::new(cfg, clock, resolver, Arc::new(store)).map_err(|e| CliError::Usage(e.to_string()))?;

    let tun = open_tunnel(&a.tunnel, a.mtu).with_context(|| format!("opening tunnel {}", a.tunnel))?;
    tun.configure(a.tun_addr.addr, a.tun_addr.prefix).with_context(|| format!("configuring {}", a.tunnel))?;
    eprintln!("relaying on {} ({}); route app traffic into it, Ctrl-C to stop", a.tunnel, a.tun_addr);

    let connector = TcpConnector { bind_device: a.bind_device.clone(), redirect: BTreeMap::new() };
    let mut live = LiveRelay::new(relay, connector, Arc::new(tun));
    live.upstream_mut().bind_device = a.bind_device.clone();
    install_signal_handlers();

    let interval = Duration::from_secs(a.report_interval);
    let mut last = Instant::now();
    let format = c.format;
    let mut tick_err = None;
    let res = live.run(&STOP, |relay| {
        if interval.is_zero() || last.elapsed() < interval || tick_err.is_some() {
            return;
        }
        last = Instant::now();
        let r = render_view(&relay.stats().all_app_view(), format).and_then(|t| emit(&mut io::stdout().lock(), &t));
        if let Err(e) = r {
            tick_err = Some(e);
            STOP.store(true, Ordering::SeqCst);
        }
    });
    let relay = live.into_relay();
    let counters = relay.counters();
    log::info!("shutdown: {counters:?}");
    emit(&mut io::stdout().lock(), &render_view(&relay.stats().all_app_view(), format)?)?;
    if let Some(e) = tick_err {
        return Err(e.context("writing report").into());
    }
    res.context("tunnel failed")?;
    Ok(())
}

fn replay_text(r: &HandshakeReport) -> String {
    let mut s = format!(
        "{} records, {} flows, {} handshakes, {} unanswered, {} skipped, {} bad checksums{}\n",
        r.records,
        r.inventory.len(),
        r.handshakes.len(),
        r.unanswered.len(),
        r.skipped,
        r.bad_checksums,
        if r.truncated { ", capture truncated" } else { "" }
    );
    for h in &r.handshakes {
        s.push_str(&format!("{}  rtt {} ms\n", h.key, round_display(h.rtt_ns)));
    }
    for k in &r.unanswered {
        s.push_str(&format!("{}  unanswered\n", k));
    }
    s
}

fn replay_csv(r: &HandshakeReport) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["flow", "syn_ns", "synack_ns", "rtt_ns"])?;
    for h in &r.handshakes {
        w.write_record([h.key.to_string(), h.syn_ns.to_string(), h.synack_ns.to_string(), h.rtt_ns.to_string()])?;
    }
    for k in &r.unanswered {
        w.write_record([k.to_string(), String::new(), String::new(), String::new()])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn replay(cli: &Cli, a: &ReplayArgs) -> anyhow::Result<()> {
    let mut reader = CaptureReader::open(&a.capture).with_context(|| format!("reading {}", a.capture.display()))?;
    let report = handshake_rtts(&mut reader, cli.common.strict_checksums).context("replaying capture")?;
    let text = match cli.common.format {
        Format::Text => replay_text(&report),
        Format::Json => serde_json::to_string_pretty(&report)?,
        Format::Csv => replay_csv(&report)?,
    };
    emit(&mut io::stdout().lock(), &text)?;
    Ok(())
}

fn load_scenario(cli: &Cli, path: &Path) -> anyhow::Result<Scenario> {
    let mut s = Scenario::from_file(path)?;
    // flags only override what the scenario left at its defaults
    if s.network_tag == "sim" && cli.common.network_tag != "unlabeled" {
        s.network_tag = cli.common.network_tag.clone();
    }
    Ok(s)
}

fn outcome_name(o: SampleOutcome) -> String {
    serde_json::to_value(o).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn simulate_summary(b: &TraceBundle, audit_ok: bool, format: Format) -> anyhow::Result<String> {
    let flows: Vec<_> = b
        .apps
        .iter()
        .map(|a| {
            let s = b.sample_for(&a.flow);
            json!({
                "flow": a.flow,
                "dst": a.key.dst().to_string(),
                "outcome": s.map(|s| s.outcome),
                "rtt_ns": s.map(|s| s.rtt_ns),
                "sent": a.sent_len,
                "received": a.received_len,
            })
        })
        .collect();
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(&json!({
            "seed": b.seed,
            "end_time_ns": b.end_time_ns,
            "flows": flows,
            "failures": b.failures,
            "external_records": b.external.len(),
            "audit_passed": audit_ok,
        }))?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["flow", "dst", "outcome", "rtt_ns", "sent", "received"])?;
            for f in &flows {
                let field = |k: &str| match &f[k] {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Null => String::new(),
                    v => v.to_string(),
                };
                w.write_record(["flow", "dst", "outcome", "rtt_ns", "sent", "received"].map(field))?;
            }
            String::from_utf8(w.into_inner()?)?
        }
        Format::Text => {
            let mut s = format!("seed {} ran to {:.3} ms virtual\n", b.seed, b.end_time_ns as f64 / 1e6);
            for a in &b.apps {
                let m = b.sample_for(&a.flow).map_or_else(
                    || "no sample".to_string(),
                    |x| format!("{} {} ms", outcome_name(x.outcome), round_display(x.rtt_ns)),
                );
                s.push_str(&format!(
                    "{:<12} {:<21} {:<28} sent {} received {}\n",
                    a.flow,
                    a.key.dst(),
                    m,
                    a.sent_len,
                    a.received_len
                ));
            }
            for f in &b.failures {
                s.push_str(&format!("failure {} {} {}\n", f.class, f.key, f.evidence));
            }
            s.push_str(&format!(
                "{} external records, zero-injection audit {}\n",
                b.external.len(),
                if audit_ok { "passed" } else { "FAILED" }
            ));
            s
        }
    })
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> anyhow::Result<()> {
    let s = load_scenario(cli, &a.scenario)?;
    let b = run_scenario(&s)?;
    if let Some(p) = &a.out {
        let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
        b.write_jsonl(BufWriter::new(f)).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.pcap {
        b.write_capture(p).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &cli.common.store {
        let (store, _) = StatsStore::open_append(p).with_context(|| format!("opening {}", p.display()))?;
        let events = b.samples.iter().cloned().map(Event::Sample).chain(b.failures.iter().cloned().map(Event::Failure));
        store.record_all(events).with_context(|| format!("appending to {}", p.display()))?;
    }
    let audit = audit_zero_injection(&b);
    for v in &audit.violations {
        log::error!("audit: {v}");
    }
    emit(&mut io::stdout().lock(), &simulate_summary(&b, audit.passed(), cli.common.format)?)?;
    if !audit.passed() {
        return Err(anyhow!("zero-injection audit failed with {} violations", audit.violations.len()));
    }
    Ok(())
}

fn measure<C: Connector + ?Sized>(
    connector: &mut C,
    clock: &dyn Clock,
    s: &Scenario,
    runs: usize,
    timeout: Duration,
    baseline: BaselineConfig,
) -> anyhow::Result<(AccuracyReport, AccuracyReport)> {
    let dests: Vec<Destination> = s
        .endpoints
        .iter()
        .filter(|e| matches!(e.behavior, Behavior::Accept { .. }))
        .map(|e| Destination { label: e.label.clone().unwrap_or_else(|| "endpoint".into()), addr: e.addr })
        .collect();
    if dests.is_empty() {
        return Err(anyhow!("scenario has no accepting endpoints to compare"));
    }
    let truth: BTreeMap<SocketAddrV4, u64> =
        s.endpoints.iter().filter_map(|e| Some((e.addr, e.behavior.handshake_ns()?))).collect();
    let mut reference = |d: &Destination, _run: usize| truth.get(&d.addr).copied();
    let direct = compare_accuracy(connector, clock, &dests, runs, timeout, MeterKind::Direct, &mut reference)?;
    let coarse = compare_accuracy(connector, clock, &dests, runs, timeout, MeterKind::Baseline(baseline), &mut reference)?;
    Ok((direct, coarse))
}

fn compare(cli: &Cli, a: &CompareArgs) -> anyhow::Result<()> {
    let s = load_scenario(cli, &a.scenario)?;
    let timeout = Duration::from_millis(cli.common.timeout_ms);
    let baseline = BaselineConfig { pre_connect: Duration::from_millis(a.pre_connect_ms) };
    let runs = a.runs as usize;
    let (direct, coarse) = if a.loopback {
        let world = LoopbackWorld::start(&s.endpoints)?;
        measure(&mut world.connector(), &MonotonicClock::new(), &s, runs, timeout, baseline)?
    } else {
        let clock = VirtualClock::new();
        measure(&mut SimConnector::new(clock.clone(), &s.endpoints), &clock, &s, runs, timeout, baseline)?
    };
    let overhead = if a.loopback { loopback_overhead(runs.max(2), timeout) } else { overhead_experiment(&s, runs.max(2)) };
    let overhead = match overhead {
        Ok(o) => Some(o),
        Err(e) => {
            log::warn!("overhead measurement skipped: {e}");
            None
        }
    };
    let text = match cli.common.format {
        Format::Text => {
            let mut t = format!("direct meter\n{}\nbaseline meter\n{}", comparison_table(&direct.rows), comparison_table(&coarse.rows));
            if let Some(o) = &overhead {
                t.push_str("\nrelay overhead\n");
                t.push_str(&o.render());
            }
            t
        }
        Format::Json => serde_json::to_string_pretty(&json!({
            "direct": direct.rows,
            "baseline": coarse.rows,
            "overhead": overhead.as_ref().map(|o| &o.rows),
        }))
        ?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["meter", "destination", "reference_ms", "meter_ms", "delta_ms", "runs"])?;
            let rows = |name: &'static str, rows: &'_ [ComparisonRow]| -> Vec<[String; 6]> {
                rows.iter()
                    .map(|r| {
                        [
                            name.to_string(),
                            r.destination.clone(),
                            r.reference_ms.to_string(),
                            r.meter_ms.to_string(),
                            r.delta_ms.to_string(),
                            r.runs.to_string(),
                        ]
                    })
                    .collect()
            };
            for r in rows("direct", &direct.rows).into_iter().chain(rows("baseline", &coarse.rows)) {
                w.write_record(r)?;
            }
            String::from_utf8(w.into_inner()?)?
        }
    };
    emit(&mut io::stdout().lock(), &text)?;
    Ok(())
}

fn report(cli: &Cli, a: &ReportArgs) -> anyhow::Result<()> {
    let path = cli.common.store.as_ref().expect("validated");
    let (store, loaded) = StatsStore::load(path).with_context(|| format!("reading {}", path.display()))?;
    if loaded.corrupt > 0 {
        log::warn!("{}: skipped {} corrupt lines", path.display(), loaded.corrupt);
    }
    let format = cli.common.format;
    let text = if a.cdf {
        let pts = store.export_cdf(a.app.as_deref(), a.tag.as_deref()).context("exporting CDF")?;
        match format {
            Format::Json => serde_json::to_string(&pts)?,
            _ => cdf_csv(&pts),
        }
    } else if let Some(app) = &a.app {
        let view = store.app_view(app)?;
        match format {
            Format::Text => render_app_view(&view),
            Format::Json => serde_json::to_string_pretty(&view)?,
            Format::Csv => app_stats_csv(std::slice::from_ref(&view)),
        }
    } else {
        render_view(&store.all_app_view(), format)?
    };
    emit(stdout_or(a.out.as_deref())?.as_mut(), &text)?;
    Ok(())
}
