//! Seeded random scenarios for property tests.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::{Behavior, ClientAction, ClientOp, EndpointSpec, Scenario, ServerMode, ServerStep};

fn delay(rng: &mut ChaCha8Rng, max_ms: u32) -> f64 {
    rng.gen_range(0..=max_ms * 100) as f64 / 100.0
}

/// Random but valid scenario; the same seed always gives the same scenario.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut endpoints = Vec::new();
    let n_tcp = rng.gen_range(1..=4);
    for i in 0..n_tcp {
        let addr = SocketAddrV4::new(Ipv4Addr::new(93, 184, 0, i as u8 + 1), [80, 443, 8080][rng.gen_range(0..3)]);
        let behavior = match rng.gen_range(0..10) {
            0..=3 => {
                let mode = match rng.gen_range(0..3) {
                    0 => ServerMode::Echo,
                    1 => ServerMode::Sink,
                    _ => {
                        let mut steps: Vec<ServerStep> =
                            (0..rng.gen_range(0..3)).map(|_| ServerStep::Send(rng.gen_range(1..5000))).collect();
                        if rng.gen_bool(0.5) {
                            steps.push(ServerStep::Close);
                        }
                        ServerMode::Script(steps)
                    }
                };
                let d = delay(&mut rng, 400);
                if rng.gen_bool(0.5) {
                    Behavior::Accept { rtt_ms: Some(d), one_way_ms: None, mode }
                } else {
                    Behavior::Accept { rtt_ms: None, one_way_ms: Some(d / 2.0), mode }
                }
            }
            4 | 5 => Behavior::Refuse { rtt_ms: delay(&mut rng, 100) },
            6 => Behavior::Blackhole,
            _ => Behavior::Drop { probability: rng.gen_range(0.0..1.0), seed: rng.gen(), rtt_ms: delay(&mut rng, 200) },
        };
        endpoints.push(EndpointSpec { addr, label: None, behavior });
    }
    let dns = SocketAddrV4::new(Ipv4Addr::new(8, 8, 8, 8), 53);
    let mut records = BTreeMap::new();
    records.insert("example.com".to_string(), vec![Ipv4Addr::new(93, 184, 216, 34)]);
    records.insert("hkminorshort.weixin.qq.com".to_string(), vec![Ipv4Addr::new(1, 1, 1, 1)]);
    endpoints.push(EndpointSpec { addr: dns, label: None, behavior: Behavior::Dns { rtt_ms: delay(&mut rng, 50), records } });
    let echo = SocketAddrV4::new(Ipv4Addr::new(93, 184, 0, 100), 7);
    endpoints.push(EndpointSpec { addr: echo, label: None, behavior: Behavior::UdpEcho { rtt_ms: delay(&mut rng, 50) } });

    let mut actions: Vec<(u32, usize, ClientOp)> = Vec::new();
    let mut order = 0usize;
    let mut push = |at: u32, op: ClientOp| {
        actions.push((at, order, op));
        order += 1;
    };
    for f in 0..rng.gen_range(1..=6) {
        let flow = format!("f{f}");
        let dst = endpoints[rng.gen_range(0..n_tcp)].addr;
        let mut t = rng.gen_range(0..2000);
        push(t, ClientOp::Open { flow: flow.clone(), dst, src_port: None });
        for _ in 0..rng.gen_range(0..4) {
            t += rng.gen_range(0..500);
            let op = if rng.gen_bool(0.8) {
                ClientOp::Send { flow: flow.clone(), len: Some(rng.gen_range(0..30000)), text: None }
            } else {
                ClientOp::Send { flow: flow.clone(), len: None, text: Some("GET / HTTP/1.1\r\n\r\n".into()) }
            };
            push(t, op);
        }
        t += rng.gen_range(0..3000);
        match rng.gen_range(0..4) {
            0 => push(t, ClientOp::Reset { flow }),
            1 => {}
            _ => push(t, ClientOp::Close { flow }),
        }
    }
    for _ in 0..rng.gen_range(0..4) {
        let t = rng.gen_range(0..4000);
        let op = if rng.gen_bool(0.5) {
            let q = ["example.com", "hkminorshort.weixin.qq.com", "missing.test"][rng.gen_range(0..3)];
            ClientOp::Udp { dst: dns, src_port: None, dns_query: Some(q.into()), text: None, len: None }
        } else {
            ClientOp::Udp { dst: echo, src_port: None, dns_query: None, text: None, len: Some(rng.gen_range(1..1200)) }
        };
        push(t, op);
    }
    actions.sort_by_key(|(t, o, _)| (*t, *o));
    Scenario {
        seed,
        network_tag: "sim".into(),
        timeout_ms: 3000.0,
        tunnel_delay_ms: delay(&mut rng, 2),
        app_addr: Ipv4Addr::new(10, 0, 0, 2),
        endpoints,
        apps: BTreeMap::new(),
        client_script: actions.into_iter().map(|(t, _, op)| ClientAction::at(t as f64, op)).collect(),
        max_time_ms: None,
        bogus_dns: None,
    }
}
