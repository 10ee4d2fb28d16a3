//! Minimal client-side TCP used to play the monitored app.
//!
//! Enough of TCP to exercise the relay: SYN retransmission, go-back-N data
//! retransmission on a single timer, window respect, FIN/RST handling. The
//! receive side consumes data immediately and acknowledges every segment.

use std::net::SocketAddrV4;

use serde::Serialize;

use crate::packet::{seq_le, seq_lt, FlowKey, TcpFlags, TcpSegment, Transport};

pub const APP_MSS: u16 = 1460;
pub const APP_WINDOW: u16 = 65535;
const PEER_MSS_FALLBACK: u16 = 536;
const SYN_RTO_NS: u64 = 1_000_000_000;
const DATA_RTO_NS: u64 = 200_000_000;
const MAX_RTO_NS: u64 = 60_000_000_000;
const MAX_SYN_TRIES: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AppPhase {
    SynSent,
    Established,
    /// Reset by the peer, aborted locally, or gave up on the handshake.
    Reset,
}

#[derive(Debug, Clone)]
pub struct AppTcp {
    /// Oriented app -> server.
    pub key: FlowKey,
    pub phase: AppPhase,
    pub iss: u32,
    irs: u32,
    rcv_nxt: u32,
    /// Everything the app has asked to send.
    pub sent: Vec<u8>,
    una_off: usize,
    nxt_off: usize,
    close_requested: bool,
    fin_sent: bool,
    pub fin_acked: bool,
    pub peer_fin: bool,
    pub received: Vec<u8>,
    peer_mss: u16,
    peer_window: u32,
    rto_ns: u64,
    syn_tries: u32,
    pub deadline: Option<u64>,
    pub syn_at: u64,
    pub synack_at: Option<u64>,
    pub reset_at: Option<u64>,
    pub reset_by_peer: bool,
    pub retransmissions: u32,
    /// When in-order payload last arrived.
    pub last_rx_at: Option<u64>,
}

impl AppTcp {
    /// New connection; returns the stack and its SYN.
    pub fn open(src: SocketAddrV4, dst: SocketAddrV4, iss: u32, now: u64) -> (Self, TcpSegment) {
        let tcp = AppTcp {
            key: FlowKey::new(Transport::Tcp, src, dst),
            phase: AppPhase::SynSent,
            iss,
            irs: 0,
            rcv_nxt: 0,
            sent: Vec::new(),
            una_off: 0,
            nxt_off: 0,
            close_requested: false,
            fin_sent: false,
            fin_acked: false,
            peer_fin: false,
            received: Vec::new(),
            peer_mss: PEER_MSS_FALLBACK,
            peer_window: 0,
            rto_ns: SYN_RTO_NS,
            syn_tries: 1,
            deadline: Some(now + SYN_RTO_NS),
            syn_at: now,
            synack_at: None,
            reset_at: None,
            reset_by_peer: false,
            retransmissions: 0,
            last_rx_at: None,
        };
        let syn = tcp.syn();
        (tcp, syn)
    }

    fn syn(&self) -> TcpSegment {
        TcpSegment::new(self.key.src_port, self.key.dst_port, self.iss, 0, TcpFlags::SYN)
            .with_window(APP_WINDOW)
            .with_mss(APP_MSS)
    }

    fn seg(&self, seq: u32, flags: TcpFlags) -> TcpSegment {
        TcpSegment::new(self.key.src_port, self.key.dst_port, seq, self.rcv_nxt, flags | TcpFlags::ACK)
            .with_window(APP_WINDOW)
    }

    fn seq_at(&self, off: usize) -> u32 {
        self.iss.wrapping_add(1).wrapping_add(off as u32)
    }

    fn snd_una(&self) -> u32 {
        self.seq_at(self.una_off).wrapping_add(self.fin_acked as u32)
    }

    fn snd_nxt(&self) -> u32 {
        self.seq_at(self.nxt_off).wrapping_add(self.fin_sent as u32)
    }

    pub fn handshake_ns(&self) -> Option<u64> {
        self.synack_at.map(|t| t - self.syn_at)
    }

    pub fn is_done(&self) -> bool {
        match self.phase {
            AppPhase::Reset => true,
            AppPhase::SynSent => false,
            AppPhase::Established => self.fin_acked && self.peer_fin,
        }
    }

    /// Every queued byte (and the FIN, if requested) has been acknowledged.
    pub fn all_acked(&self) -> bool {
        self.una_off == self.sent.len() && (!self.close_requested || self.fin_acked)
    }

    pub fn send(&mut self, data: &[u8], now: u64) -> Vec<TcpSegment> {
        if self.close_requested || self.phase == AppPhase::Reset {
            return Vec::new();
        }
        self.sent.extend_from_slice(data);
        self.pump(now)
    }

    pub fn close(&mut self, now: u64) -> Vec<TcpSegment> {
        if self.phase == AppPhase::Reset {
            return Vec::new();
        }
        self.close_requested = true;
        self.pump(now)
    }

    pub fn reset(&mut self, now: u64) -> Vec<TcpSegment> {
        let seg = match self.phase {
            AppPhase::Reset => return Vec::new(),
            AppPhase::SynSent => TcpSegment::new(self.key.src_port, self.key.dst_port, self.iss.wrapping_add(1), 0, TcpFlags::RST),
            AppPhase::Established => self.seg(self.snd_nxt(), TcpFlags::RST),
        };
        self.enter_reset(now, false);
        vec![seg]
    }

    fn enter_reset(&mut self, now: u64, by_peer: bool) {
        self.phase = AppPhase::Reset;
        self.reset_at = Some(now);
        self.reset_by_peer = by_peer;
        self.deadline = None;
    }

    /// Send whatever the window allows.
    fn pump(&mut self, now: u64) -> Vec<TcpSegment> {
        let mut out = Vec::new();
        if self.phase != AppPhase::Established {
            return out;
        }
        loop {
            let in_flight = self.nxt_off - self.una_off;
            let avail = (self.peer_window as usize).saturating_sub(in_flight);
            let remaining = self.sent.len() - self.nxt_off;
            if remaining == 0 || avail == 0 {
                break;
            }
            let n = remaining.min(avail).min(self.peer_mss as usize);
            let payload = self.sent[self.nxt_off..self.nxt_off + n].to_vec();
            out.push(self.seg(self.seq_at(self.nxt_off), TcpFlags::PSH).with_payload(payload));
            self.nxt_off += n;
        }
        if self.close_requested && !self.fin_sent && self.nxt_off == self.sent.len() {
            out.push(self.seg(self.snd_nxt(), TcpFlags::FIN));
            self.fin_sent = true;
        }
        if !out.is_empty() && self.deadline.is_none() {
            self.deadline = Some(now + self.rto_ns);
        }
        out
    }

    pub fn on_segment(&mut self, seg: &TcpSegment, now: u64) -> Vec<TcpSegment> {
        match self.phase {
            AppPhase::Reset => Vec::new(),
            AppPhase::SynSent => {
                if seg.flags.rst() {
                    if seg.flags.ack() && seg.ack == self.iss.wrapping_add(1) {
                        self.enter_reset(now, true);
                    }
                    return Vec::new();
                }
                if !(seg.flags.syn() && seg.flags.ack() && seg.ack == self.iss.wrapping_add(1)) {
                    return Vec::new();
                }
                self.irs = seg.seq;
                self.rcv_nxt = seg.seq.wrapping_add(1);
                self.peer_mss = seg.mss().unwrap_or(PEER_MSS_FALLBACK);
                self.peer_window = seg.window as u32;
                self.phase = AppPhase::Established;
                self.synack_at = Some(now);
                self.deadline = None;
                self.rto_ns = DATA_RTO_NS;
                let mut out = vec![self.seg(self.snd_nxt(), TcpFlags::empty())];
                out.extend(self.pump(now));
                out
            }
            AppPhase::Established => self.on_established(seg, now),
        }
    }

    fn on_established(&mut self, seg: &TcpSegment, now: u64) -> Vec<TcpSegment> {
        if seg.flags.rst() {
            self.enter_reset(now, true);
            return Vec::new();
        }
        if seg.flags.syn() {
            // our handshake ACK was lost
            return vec![self.seg(self.snd_nxt(), TcpFlags::empty())];
        }
        let mut need_ack = false;
        if seg.flags.ack() {
            let una = self.snd_una();
            let nxt = self.snd_nxt();
            if seq_lt(una, seg.ack) && seq_le(seg.ack, nxt) {
                let mut acked = seg.ack.wrapping_sub(una) as usize;
                if self.fin_sent && seg.ack == nxt && !self.fin_acked {
                    self.fin_acked = true;
                    acked -= 1;
                }
                self.una_off += acked;
                self.rto_ns = DATA_RTO_NS;
                self.deadline = if self.snd_una() == self.snd_nxt() { None } else { Some(now + self.rto_ns) };
            }
            self.peer_window = seg.window as u32;
        }
        if !seg.payload.is_empty() {
            if seg.seq == self.rcv_nxt && !self.peer_fin {
                self.received.extend_from_slice(&seg.payload);
                self.rcv_nxt = self.rcv_nxt.wrapping_add(seg.payload.len() as u32);
                self.last_rx_at = Some(now);
            }
            need_ack = true;
        }
        if seg.flags.fin() {
            let fin_seq = seg.seq.wrapping_add(seg.payload.len() as u32);
            if !self.peer_fin && fin_seq == self.rcv_nxt {
                self.peer_fin = true;
                self.rcv_nxt = self.rcv_nxt.wrapping_add(1);
            }
            need_ack = true;
        }
        let mut out = self.pump(now);
        if need_ack && out.is_empty() {
            out.push(self.seg(self.snd_nxt(), TcpFlags::empty()));
        }
        out
    }

    /// Fire the retransmission timer if due.
    pub fn on_timer(&mut self, now: u64) -> Vec<TcpSegment> {
        match self.deadline {
            Some(d) if d <= now => {}
            _ => return Vec::new(),
        }
        self.deadline = None;
        match self.phase {
            AppPhase::Reset => Vec::new(),
            AppPhase::SynSent => {
                if self.syn_tries >= MAX_SYN_TRIES {
                    self.enter_reset(now, false);
                    return Vec::new();
                }
                self.syn_tries += 1;
                self.retransmissions += 1;
                self.rto_ns = (self.rto_ns * 2).min(MAX_RTO_NS);
                self.deadline = Some(now + self.rto_ns);
                vec![self.syn()]
            }
            AppPhase::Established => {
                if self.snd_una() == self.snd_nxt() {
                    return Vec::new();
                }
                self.retransmissions += 1;
                self.nxt_off = self.una_off;
                if !self.fin_acked {
                    self.fin_sent = false;
                }
                self.rto_ns = (self.rto_ns * 2).min(MAX_RTO_NS);
                let mut out = self.pump(now);
                if out.is_empty() {
                    // zero window: probe with one byte
                    if self.nxt_off < self.sent.len() {
                        let b = self.sent[self.nxt_off..self.nxt_off + 1].to_vec();
                        out.push(self.seg(self.seq_at(self.nxt_off), TcpFlags::PSH).with_payload(b));
                        self.nxt_off += 1;
                    }
                }
                self.deadline = Some(now + self.rto_ns);
                out
            }
        }
    }
}
