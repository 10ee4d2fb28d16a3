use std::io::Cursor;
use std::net::{Ipv4Addr, SocketAddrV4, TcpListener, TcpStream};

use relaymon::attribution::platform_resolver;
use relaymon::net_io::{handshake_rtts, open_tunnel, CaptureReader, NetIoError};
use relaymon::packet::{build_tcp_packet, FlowKey, TcpFlags, TcpSegment, Transport};
use relaymon::sim::{run_scenario, Behavior, ClientAction, ClientOp, EndpointSpec, Scenario, ServerMode};

const APP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);

/// Classic little-endian capture written byte by byte, raw IPv4 link type.
fn capture(records: &[(u64, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0xa1b2_c3d4u32.to_le_bytes());
    out.extend_from_slice(&[2, 0, 4, 0]);
    out.extend_from_slice(&[0; 8]);
    out.extend_from_slice(&65535u32.to_le_bytes());
    out.extend_from_slice(&101u32.to_le_bytes());
    for (us, data) in records {
        let base = 1_700_000_000u64 * 1_000_000 + us;
        out.extend_from_slice(&((base / 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&((base % 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
    }
    out
}

fn syn(port: u16, dst: Ipv4Addr, iss: u32) -> Vec<u8> {
    build_tcp_packet(APP, dst, &TcpSegment::new(port, 443, iss, 0, TcpFlags::SYN).with_mss(1460)).unwrap()
}

fn synack(port: u16, dst: Ipv4Addr, iss: u32) -> Vec<u8> {
    let seg = TcpSegment::new(443, port, 9000, iss.wrapping_add(1), TcpFlags::SYN | TcpFlags::ACK).with_mss(1460);
    build_tcp_packet(dst, APP, &seg).unwrap()
}

#[test]
fn three_handshakes_pair_to_their_gaps() {
    let (a, b, c) = (Ipv4Addr::new(216, 58, 221, 132), Ipv4Addr::new(31, 13, 79, 251), Ipv4Addr::new(1, 2, 3, 4));
    // interleaved, with an unrelated SYN-ACK that must not pair
    let recs = vec![
        (0, syn(40001, a, 100)),
        (1_000, syn(40002, b, 200)),
        (2_000, syn(40003, c, 300)),
        (3_000, synack(40001, a, 999)),
        (4_260, synack(40001, a, 100)),
        (37_550, synack(40002, b, 200)),
        (286_850, synack(40003, c, u32::MAX)),
        (286_851, synack(40003, c, 300)),
    ];
    let bytes = capture(&recs);
    let mut r = CaptureReader::new(Cursor::new(bytes)).unwrap();
    let rep = handshake_rtts(&mut r, true).unwrap();
    let rtts: Vec<u64> = rep.handshakes.iter().map(|h| h.rtt_ns).collect();
    assert_eq!(rtts, vec![4_260_000, 36_550_000, 284_851_000]);
    assert_eq!(rep.inventory.len(), 3);
    assert!(rep.unanswered.is_empty());
    assert_eq!(rep.records, recs.len());
}

#[test]
fn empty_capture_and_unanswered_syn() {
    let mut r = CaptureReader::new(Cursor::new(capture(&[]))).unwrap();
    let rep = handshake_rtts(&mut r, false).unwrap();
    assert!(rep.handshakes.is_empty() && rep.inventory.is_empty() && rep.records == 0);

    let dst = Ipv4Addr::new(5, 6, 7, 8);
    let mut r = CaptureReader::new(Cursor::new(capture(&[(0, syn(40010, dst, 1)), (5, syn(40010, dst, 1))]))).unwrap();
    let rep = handshake_rtts(&mut r, false).unwrap();
    assert!(rep.handshakes.is_empty());
    assert_eq!(rep.unanswered.len(), 1);
    assert_eq!(rep.unanswered[0].dst(), SocketAddrV4::new(dst, 443));
}

#[test]
fn bad_magic_is_reported() {
    let mut bytes = capture(&[]);
    bytes[0] = 0;
    assert!(matches!(CaptureReader::new(Cursor::new(bytes)), Err(NetIoError::BadMagic(_))));
}

#[test]
fn simulated_tunnel_capture_replays_to_measured_rtts() {
    let mut s = Scenario::from_json(r#"{"endpoints": [], "tunnel_delay_ms": 0.25}"#).unwrap();
    for (i, ms) in [4.26, 36.55, 284.85].into_iter().enumerate() {
        let addr: SocketAddrV4 = format!("198.51.100.{}:443", i + 1).parse().unwrap();
        s.endpoints.push(EndpointSpec {
            addr,
            label: None,
            behavior: Behavior::Accept { rtt_ms: Some(ms), one_way_ms: None, mode: ServerMode::Echo },
        });
        s.client_script.push(ClientAction::at(i as f64, ClientOp::Open { flow: format!("f{i}"), dst: addr, src_port: None }));
    }
    let b = run_scenario(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tunnel.pcap");
    b.write_capture(&path).unwrap();
    let mut r = CaptureReader::open(&path).unwrap();
    let rep = handshake_rtts(&mut r, true).unwrap();
    assert_eq!(rep.handshakes.len(), 3);
    for h in &rep.handshakes {
        let sample = b.samples.iter().find(|x| x.key == h.key).unwrap();
        assert_eq!(h.rtt_ns, sample.rtt_ns, "{}", h.key);
    }
    assert_eq!(rep.bad_checksums, 0);
}

#[test]
fn own_socket_is_attributed_to_this_process() {
    if !std::path::Path::new("/proc/net/tcp").exists() {
        eprintln!("skipping: no /proc owner tables");
        return;
    }
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let client = TcpStream::connect(listener.local_addr().unwrap()).unwrap();
    let (_server, _) = listener.accept().unwrap();
    let local = match client.local_addr().unwrap() {
        std::net::SocketAddr::V4(a) => a,
        other => panic!("{other}"),
    };
    let remote = match listener.local_addr().unwrap() {
        std::net::SocketAddr::V4(a) => a,
        other => panic!("{other}"),
    };
    let key = FlowKey::new(Transport::Tcp, local, remote);
    let app = platform_resolver().resolve(&key).expect("owner found");
    let comm = std::fs::read_to_string("/proc/self/comm").unwrap();
    assert_eq!(app.name, comm.trim());
    assert_eq!(app.numeric_id, Some(std::process::id()));
}

#[test]
fn tunnel_opens_or_explains_why_not() {
    match open_tunnel("rmtest0", 1500) {
        Ok(dev) => assert_eq!(dev.name(), "rmtest0"),
        Err(e @ (NetIoError::PermissionDenied(_) | NetIoError::Unsupported(_))) => {
            eprintln!("skipping: {e}");
            assert!(!e.to_string().is_empty());
        }
        Err(e) => panic!("unexpected tunnel error: {e}"),
    }
}
