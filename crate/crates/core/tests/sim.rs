use std::net::SocketAddrV4;

use relaymon::diag::FailureClass;
use relaymon::rtt::SampleOutcome;
use relaymon::sim::{
    audit_zero_injection, overhead_experiment, random_scenario, run_scenario, AppPhase, Behavior, ClientAction,
    ClientOp, EndpointSpec, Scenario, ServerMode, ServerStep, SimError,
};
use sha2::{Digest, Sha256};

fn addr(s: &str) -> SocketAddrV4 {
    s.parse().unwrap()
}

fn scenario(endpoints: Vec<EndpointSpec>, script: Vec<ClientAction>) -> Scenario {
    let mut s = Scenario::from_json(r#"{"endpoints": []}"#).unwrap();
    s.endpoints = endpoints;
    s.client_script = script;
    s
}

fn ep(a: &str, behavior: Behavior) -> EndpointSpec {
    EndpointSpec { addr: addr(a), label: None, behavior }
}

fn accept(rtt_ms: f64, mode: ServerMode) -> Behavior {
    Behavior::Accept { rtt_ms: Some(rtt_ms), one_way_ms: None, mode }
}

fn open(at: f64, flow: &str, dst: &str) -> ClientAction {
    ClientAction::at(at, ClientOp::Open { flow: flow.into(), dst: addr(dst), src_port: None })
}

fn send(at: f64, flow: &str, len: usize) -> ClientAction {
    ClientAction::at(at, ClientOp::Send { flow: flow.into(), len: Some(len), text: None })
}

fn close(at: f64, flow: &str) -> ClientAction {
    ClientAction::at(at, ClientOp::Close { flow: flow.into() })
}

fn sha(b: &[u8]) -> Vec<u8> {
    Sha256::digest(b).to_vec()
}

#[test]
fn one_way_delay_gives_exact_rtt() {
    let s = scenario(
        vec![ep("216.58.221.132:443", Behavior::Accept { rtt_ms: None, one_way_ms: Some(2.13), mode: ServerMode::Echo })],
        vec![open(0.0, "f", "216.58.221.132:443")],
    );
    let b = run_scenario(&s).unwrap();
    let sample = b.sample_for("f").unwrap();
    assert_eq!(sample.outcome, SampleOutcome::Success);
    assert_eq!(sample.rtt_ns, 4_260_000);
    assert_eq!(b.oracle[0].error_ns(), Some(0));
    assert_eq!(b.app("f").unwrap().handshake_ns, Some(4_260_000));
}

#[test]
fn refused_endpoint_resets_the_app() {
    let s = scenario(vec![ep("1.2.3.4:80", Behavior::Refuse { rtt_ms: 2.0 })], vec![open(0.0, "f", "1.2.3.4:80")]);
    let b = run_scenario(&s).unwrap();
    assert_eq!(b.sample_for("f").unwrap().outcome, SampleOutcome::Refused);
    assert_eq!(b.failures.len(), 1);
    assert_eq!(b.failures[0].class, FailureClass::Refused);
    let app = b.app("f").unwrap();
    assert_eq!(app.phase, AppPhase::Reset);
    assert!(app.reset_by_peer);
}

#[test]
fn blackhole_times_out_at_three_seconds() {
    let s = scenario(vec![ep("5.6.7.8:80", Behavior::Blackhole)], vec![open(0.0, "f", "5.6.7.8:80")]);
    let b = run_scenario(&s).unwrap();
    let sample = b.sample_for("f").unwrap();
    assert_eq!(sample.outcome, SampleOutcome::Timeout);
    assert_eq!(sample.rtt_ns, 3_000_000_000);
    assert_eq!(b.failures[0].class, FailureClass::Timeout);
    assert!(b.app("f").unwrap().reset_by_peer);
}

#[test]
fn mebibyte_echo_is_byte_identical() {
    let s = scenario(
        vec![ep("9.9.9.9:80", accept(10.0, ServerMode::Echo))],
        vec![open(0.0, "f", "9.9.9.9:80"), send(0.0, "f", 1 << 20), close(5000.0, "f")],
    );
    let b = run_scenario(&s).unwrap();
    let (sent, received) = &b.app_streams["f"];
    assert_eq!(sent.len(), 1 << 20);
    assert_eq!(sha(sent), sha(received));
    let id = b.flow_trace("f").unwrap().id;
    assert_eq!(sha(&b.server_rx[&id]), sha(sent));
    let app = b.app("f").unwrap();
    assert!(app.acked_all && app.peer_fin, "{app:?}");
    assert!(audit_zero_injection(&b).passed());
}

#[test]
fn half_close_delivers_data_then_fin() {
    let s = scenario(
        vec![ep("9.9.9.9:80", accept(10.0, ServerMode::Script(vec![ServerStep::SendText("x".into()), ServerStep::Close])))],
        vec![open(0.0, "f", "9.9.9.9:80"), send(100.0, "f", 300), close(200.0, "f")],
    );
    let b = run_scenario(&s).unwrap();
    let (_, received) = &b.app_streams["f"];
    assert_eq!(received, b"x");
    let app = b.app("f").unwrap();
    assert!(app.peer_fin && app.acked_all);
    let id = b.flow_trace("f").unwrap().id;
    // the app could keep sending after the peer's FIN
    assert_eq!(b.server_rx[&id].len(), 300);
}

#[test]
fn replay_is_bit_identical_and_audit_passes() {
    for seed in 0..20 {
        let s = random_scenario(seed);
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(sha(a.to_jsonl().as_bytes()), sha(b.to_jsonl().as_bytes()), "seed {seed}");
        let report = audit_zero_injection(&a);
        assert!(report.passed(), "seed {seed}: {:?}", report.violations);
    }
}

#[test]
fn invalid_scenario_is_rejected() {
    let s = scenario(vec![], vec![send(0.0, "ghost", 1)]);
    assert!(matches!(run_scenario(&s), Err(SimError::ScenarioInvalid(_))));
}

#[test]
fn null_model_overhead_is_zero() {
    let s = scenario(vec![ep("9.9.9.9:80", accept(36.55, ServerMode::Echo))], vec![]);
    let r = overhead_experiment(&s, 5).unwrap();
    for row in &r.rows {
        assert_eq!(row.overhead.mean_ms, 0.0, "{}", r.render());
        assert_eq!(row.direct.n, 5);
    }
    let mut slow = s.clone();
    slow.tunnel_delay_ms = 1.5;
    let r = overhead_experiment(&slow, 3).unwrap();
    assert!((r.row("handshake").unwrap().overhead.mean_ms - 3.0).abs() < 1e-9);
}

#[test]
fn accepted_flows_complete_over_random_scenarios() {
    for seed in 0..100 {
        let s = random_scenario(seed);
        let b = run_scenario(&s).unwrap();
        for a in &b.apps {
            let Some(Behavior::Accept { mode, .. }) = s.endpoint(a.key.dst()).map(|e| &e.behavior) else { continue };
            let ended = |pick: fn(&ClientOp) -> Option<&String>| s.client_script.iter().any(|x| pick(&x.op) == Some(&a.flow));
            let closed = ended(|op| match op {
                ClientOp::Close { flow } => Some(flow),
                _ => None,
            });
            let reset = ended(|op| match op {
                ClientOp::Reset { flow } => Some(flow),
                _ => None,
            });
            if reset || a.phase != AppPhase::Established {
                continue;
            }
            assert!(a.acked_all, "seed {seed}: {a:?}");
            if closed {
                assert!(a.peer_fin, "seed {seed}: {a:?}");
                if *mode == ServerMode::Echo {
                    let (sent, received) = &b.app_streams[&a.flow];
                    assert_eq!(sha(sent), sha(received), "seed {seed}: {}", a.flow);
                }
            }
        }
    }
}

#[test]
fn audit_flags_traffic_the_app_did_not_cause() {
    use relaymon::sim::{ExternalOp, ExternalRecord};
    use relaymon::FlowId;
    let s = scenario(
        vec![ep("9.9.9.9:80", accept(10.0, ServerMode::Sink))],
        vec![open(0.0, "f", "9.9.9.9:80"), send(0.0, "f", 100), close(50.0, "f")],
    );
    let clean = run_scenario(&s).unwrap();
    assert!(audit_zero_injection(&clean).passed());
    let id = clean.flow_trace("f").unwrap().id;

    let mut extra_probe = clean.clone();
    extra_probe.external.push(ExternalRecord { t_ns: 1, id: FlowId(999), op: ExternalOp::Connect { dst: addr("9.9.9.9:80") } });
    assert_eq!(audit_zero_injection(&extra_probe).violations.len(), 1);

    let mut second_connect = clean.clone();
    second_connect.external.push(ExternalRecord { t_ns: 1, id, op: ExternalOp::Connect { dst: addr("9.9.9.9:80") } });
    assert!(!audit_zero_injection(&second_connect).passed());

    let mut forged = clean.clone();
    forged.external_streams.get_mut(&id).unwrap()[0] ^= 0xff;
    assert!(!audit_zero_injection(&forged).passed());

    let mut unasked_fin = clean.clone();
    unasked_fin.script.retain(|a| !matches!(a.op, ClientOp::Close { .. }));
    assert!(!audit_zero_injection(&unasked_fin).passed());
}

#[test]
fn bogus_dns_answer_is_diagnosed_through_the_relay() {
    let mut records = std::collections::BTreeMap::new();
    records.insert("hkminorshort.weixin.qq.com".to_string(), vec!["1.1.1.1".parse().unwrap()]);
    records.insert("example.com".to_string(), vec!["93.184.216.34".parse().unwrap()]);
    let udp = |at: f64, q: &str| {
        ClientAction::at(at, ClientOp::Udp { dst: addr("8.8.8.8:53"), src_port: None, dns_query: Some(q.into()), text: None, len: None })
    };
    let s = scenario(
        vec![ep("8.8.8.8:53", Behavior::Dns { rtt_ms: 5.0, records })],
        vec![udp(0.0, "hkminorshort.weixin.qq.com"), udp(10.0, "example.com"), udp(20.0, "missing.test")],
    );
    let b = run_scenario(&s).unwrap();
    assert_eq!(b.counters.dns_inspected, 3);
    let diag: Vec<_> = b.failures.iter().filter(|f| f.class == FailureClass::DnsMisconfig).collect();
    assert_eq!(diag.len(), 1);
    assert!(diag[0].evidence.contains("hkminorshort.weixin.qq.com"));
    assert!(b.udp_payloads.values().all(|(sent, received)| sent.len() == 1 && received.len() == 1));
    assert!(audit_zero_injection(&b).passed());
}
