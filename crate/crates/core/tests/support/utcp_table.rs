//! Interpreter for docs/utcp_transitions.csv that drives `TcpFlowState` with
//! random symbol sequences and checks every step against the table.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddrV4;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relaymon::packet::{FlowKey, TcpFlags, TcpSegment, Transport};
use relaymon::utcp::{initial_sequence, ExternalEvent, FailReason, TcpAction, TcpFlowState};
use relaymon::FlowId;

pub const SYMBOLS: [&str; 11] =
    ["syn", "ack", "data", "data_ooo", "fin", "fin_cross", "rst", "connected", "ext_data", "peer_closed", "connect_failed"];

pub type Table = BTreeMap<(String, String), (String, Vec<String>)>;

pub fn load_table() -> Table {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/utcp_transitions.csv");
    let mut rdr = csv::Reader::from_path(path).expect("transition table present");
    let mut t = Table::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let actions = if rec[3].is_empty() { Vec::new() } else { rec[3].split(';').map(String::from).collect() };
        let prev = t.insert((rec[0].to_string(), rec[1].to_string()), (rec[2].to_string(), actions));
        assert!(prev.is_none(), "duplicate row {} {}", &rec[0], &rec[1]);
    }
    t
}

/// What the interpreter knows: the table state plus the sequence counters
/// implied by the actions taken so far.
struct Model {
    state: String,
    iss: u32,
    irs: u32,
    rcv_nxt: u32,
    snd_nxt: u32,
    snd_una: u32,
    emitted: u64,
    delivered: u64,
}

enum Input {
    Seg(TcpSegment),
    Ext(ExternalEvent),
}

fn plausible(state: &str) -> &'static [&'static str] {
    match state {
        "CLOSED" => &["syn"],
        "SYN_SEEN/pending" => &["connected"],
        "SYN_SEEN/answered" => &["ack", "data", "fin"],
        "ESTABLISHED" => &["data", "ext_data", "ack", "peer_closed", "fin", "fin_cross", "data_ooo"],
        "FIN_WAIT_LOCAL/unacked" | "FIN_WAIT_LOCAL/acked" => &["ack", "data", "fin", "fin_cross", "syn"],
        "FIN_WAIT_REMOTE" => &["ext_data", "peer_closed", "ack"],
        "CLOSING" => &["ack", "fin", "fin_cross"],
        _ => &SYMBOLS,
    }
}

fn input(sym: &str, m: &Model, rng: &mut ChaCha8Rng, len: &mut usize) -> Input {
    let (sp, dp) = (40000, 443);
    let seg = |seq, ack, flags| TcpSegment::new(sp, dp, seq, ack, flags).with_window(65535);
    *len = rng.gen_range(1..=1460);
    let payload = vec![0xAB; *len];
    Input::Seg(match sym {
        "syn" => seg(m.irs, 0, TcpFlags::SYN).with_mss(1460),
        "ack" => seg(m.rcv_nxt, m.snd_nxt, TcpFlags::ACK),
        "data" => seg(m.rcv_nxt, m.snd_nxt, TcpFlags::ACK | TcpFlags::PSH).with_payload(payload),
        "data_ooo" => seg(m.rcv_nxt.wrapping_add(1000), m.snd_nxt, TcpFlags::ACK | TcpFlags::PSH).with_payload(payload),
        "fin" => seg(m.rcv_nxt, m.snd_nxt, TcpFlags::FIN | TcpFlags::ACK),
        "fin_cross" => seg(m.rcv_nxt, m.snd_una, TcpFlags::FIN | TcpFlags::ACK),
        "rst" => seg(m.rcv_nxt, 0, TcpFlags::RST),
        "connected" => return Input::Ext(ExternalEvent::Connected),
        "ext_data" => return Input::Ext(ExternalEvent::Data(payload)),
        "peer_closed" => return Input::Ext(ExternalEvent::PeerClosed),
        "connect_failed" => {
            let r = *[FailReason::Refused, FailReason::Unreachable, FailReason::Timeout, FailReason::Io].choose(rng).unwrap();
            return Input::Ext(ExternalEvent::ConnectFailed(r));
        }
        other => panic!("unknown symbol {other}"),
    })
}

pub fn run_seed(seed: u64, table: &Table, covered: &mut BTreeSet<(String, String)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = FlowKey::new(Transport::Tcp, SocketAddrV4::new([10, 0, 0, 2].into(), 40000), SocketAddrV4::new([1, 2, 3, 4].into(), 443));
    let iss = initial_sequence(seed);
    let irs: u32 = rng.gen();
    let mut tcp = TcpFlowState::new(key, iss, FlowId(seed));
    let mut m = Model { state: "CLOSED".into(), iss, irs, rcv_nxt: 0, snd_nxt: iss, snd_una: iss, emitted: 0, delivered: 0 };
    let steps = rng.gen_range(1..60);
    for step in 0..steps {
        let sym = if rng.gen_bool(0.7) { *plausible(&m.state).choose(&mut rng).unwrap() } else { *SYMBOLS.choose(&mut rng).unwrap() };
        let ctx = format!("seed {seed} step {step}: {} --{sym}-->", m.state);
        let mut len = 0;
        let inp = input(sym, &m, &mut rng, &mut len);
        let (next, expect) = table.get(&(m.state.clone(), sym.to_string())).unwrap_or_else(|| panic!("{ctx} no row"));
        covered.insert((m.state.clone(), sym.to_string()));
        let tr = match &inp {
            Input::Seg(s) => tcp.on_tunnel_segment(s),
            Input::Ext(e) => tcp.on_external_event(e),
        };
        let labels: Vec<&str> = tr.actions.iter().map(TcpAction::label).collect();
        assert_eq!(&tr.state.table_state(), next, "{ctx}");
        assert_eq!(labels, *expect, "{ctx}");

        // counters implied by the table row
        let acks_all = matches!(sym, "ack" | "data" | "data_ooo" | "fin");
        let live = !matches!(m.state.as_str(), "CLOSED" | "SYN_SEEN/pending" | "TIME_WAIT_BRIEF" | "ABORTED");
        let before_snd = m.snd_nxt;
        if acks_all && live && expect.first().map(String::as_str) != Some("drop") {
            m.snd_una = before_snd;
        }
        for a in expect {
            match a.as_str() {
                "open_external" => m.rcv_nxt = m.irs.wrapping_add(1),
                "emit_synack" if m.state == "SYN_SEEN/pending" => m.snd_nxt = m.iss.wrapping_add(1),
                "deliver" => {
                    m.rcv_nxt = m.rcv_nxt.wrapping_add(len as u32);
                    m.delivered += len as u64;
                }
                "close_half" => m.rcv_nxt = m.rcv_nxt.wrapping_add(1),
                "emit_data" => {
                    m.snd_nxt = m.snd_nxt.wrapping_add(len as u32);
                    m.emitted += len as u64;
                }
                "emit_fin" => m.snd_nxt = m.snd_nxt.wrapping_add(1),
                _ => {}
            }
        }
        m.state = next.clone();

        // emitted segments carry the model's sequence numbers
        let mut seq = before_snd;
        for a in &tr.actions {
            if let TcpAction::EmitSegment(s) = a {
                assert_eq!(s.ack, m.rcv_nxt, "{ctx} ack field");
                if s.flags.syn() {
                    assert_eq!(s.seq, m.iss, "{ctx} SYN-ACK seq");
                } else {
                    assert_eq!(s.seq, seq, "{ctx} seq field");
                    seq = seq.wrapping_add(s.seq_len());
                }
            }
        }
        let st = &tr.state;
        assert_eq!((st.snd_nxt, st.rcv_nxt), (m.snd_nxt, m.rcv_nxt), "{ctx} counters");
        // sequence conservation: everything sent consumed exactly its own space
        if m.state != "CLOSED" {
            let sent = st.syn_ack_sent as u64 + m.emitted + st.fin_sent as u64;
            assert_eq!(st.snd_nxt.wrapping_sub(st.iss) as u64, sent, "{ctx} sequence conservation");
            let recv = 1 + m.delivered + st.peer_fin as u64;
            assert_eq!(st.rcv_nxt.wrapping_sub(st.irs) as u64, recv, "{ctx} mirror conservation");
        }
        tcp = tr.state;
    }
}
