//! App-facing TCP state machine.
//!
//! The relay terminates each app connection in user space. This module
//! holds the per-flow state and computes transitions as pure functions:
//! the same state and input always produce the same next state and the
//! same ordered list of [`TcpAction`]s. Nothing here performs I/O.
//!
//! The tunnel is an in-host queue without loss, so there are no
//! retransmission timers and out-of-order segments are answered with a
//! duplicate ACK rather than buffered. The SYN-ACK towards the app is held
//! back until the external connection reports [`ExternalEvent::Connected`].
//!
//! The full edge list lives in `docs/utcp_transitions.csv`.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::{seq_le, seq_lt, FlowKey, TcpFlags, TcpSegment};
use crate::FlowId;

pub const DEFAULT_WINDOW: u16 = 65535;
pub const DEFAULT_LOCAL_MSS: u16 = 1460;
/// MSS assumed when the SYN carries no option (RFC 879).
pub const DEFAULT_PEER_MSS: u16 = 536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Closed,
    /// App SYN received; external connect pending or SYN-ACK awaiting the app's ACK.
    SynSeen,
    Established,
    /// Our FIN sent (the server closed); the app may still send.
    FinWaitLocal,
    /// App FIN received; waiting for the server side to close.
    FinWaitRemote,
    /// Both FINs exchanged, ours not yet acknowledged.
    Closing,
    TimeWaitBrief,
    Aborted,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Closed | Phase::TimeWaitBrief | Phase::Aborted)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Closed => "CLOSED",
            Phase::SynSeen => "SYN_SEEN",
            Phase::Established => "ESTABLISHED",
            Phase::FinWaitLocal => "FIN_WAIT_LOCAL",
            Phase::FinWaitRemote => "FIN_WAIT_REMOTE",
            Phase::Closing => "CLOSING",
            Phase::TimeWaitBrief => "TIME_WAIT_BRIEF",
            Phase::Aborted => "ABORTED",
        };
        f.write_str(s)
    }
}

/// Why the external side failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailReason {
    Refused,
    Unreachable,
    Timeout,
    /// Local resource exhaustion while opening the connection.
    Local,
    /// I/O error on an established connection.
    Io,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExternalEvent {
    Connected,
    Data(Vec<u8>),
    PeerClosed,
    ConnectFailed(FailReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseMode {
    /// The app finished sending; shut down the write half.
    Half,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TcpAction {
    EmitSegment(TcpSegment),
    DeliverPayload(Vec<u8>),
    OpenExternal(FlowKey),
    CloseExternal(CloseMode),
    Drop,
    /// Emit this RST segment to the app.
    Reset(TcpSegment),
}

impl TcpAction {
    /// Short label used by traces and the transition-table oracle.
    pub fn label(&self) -> &'static str {
        match self {
            TcpAction::EmitSegment(s) if s.flags.syn() => "emit_synack",
            TcpAction::EmitSegment(s) if s.flags.fin() => "emit_fin",
            TcpAction::EmitSegment(s) if !s.payload.is_empty() => "emit_data",
            TcpAction::EmitSegment(_) => "emit_ack",
            TcpAction::DeliverPayload(_) => "deliver",
            TcpAction::OpenExternal(_) => "open_external",
            TcpAction::CloseExternal(CloseMode::Half) => "close_half",
            TcpAction::CloseExternal(CloseMode::Abort) => "close_abort",
            TcpAction::Drop => "drop",
            TcpAction::Reset(_) => "reset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UtcpFault {
    #[error("out-of-order segment: expected seq {expected}, got {got}")]
    OutOfOrderSegment { expected: u32, got: u32 },
    #[error("segment for a flow with no state")]
    StraySegment,
    #[error("{event} is not valid in {phase}")]
    EventInInvalidPhase { phase: Phase, event: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub state: TcpFlowState,
    pub actions: Vec<TcpAction>,
    pub fault: Option<UtcpFault>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpFlowState {
    /// App to server direction.
    pub key: FlowKey,
    pub phase: Phase,
    pub iss: u32,
    pub snd_una: u32,
    pub snd_nxt: u32,
    /// The app's initial sequence number.
    pub irs: u32,
    pub rcv_nxt: u32,
    pub peer_mss: u16,
    pub local_mss: u16,
    pub advertised_window: u16,
    pub peer_window: u16,
    pub syn_ack_sent: bool,
    pub fin_sent: bool,
    pub fin_acked: bool,
    pub peer_fin: bool,
    splice: FlowId,
}

impl TcpFlowState {
    /// A closed flow that will reference `splice` once opened.
    pub fn new(key: FlowKey, iss: u32, splice: FlowId) -> Self {
        TcpFlowState {
            key,
            phase: Phase::Closed,
            iss,
            snd_una: iss,
            snd_nxt: iss,
            irs: 0,
            rcv_nxt: 0,
            peer_mss: DEFAULT_PEER_MSS,
            local_mss: DEFAULT_LOCAL_MSS,
            advertised_window: DEFAULT_WINDOW,
            peer_window: 0,
            syn_ack_sent: false,
            fin_sent: false,
            fin_acked: false,
            peer_fin: false,
            splice,
        }
    }

    pub fn with_window(mut self, window: u16) -> Self {
        self.advertised_window = window;
        self
    }

    pub fn with_local_mss(mut self, mss: u16) -> Self {
        self.local_mss = mss;
        self
    }

    /// The paired external connection; set exactly when the flow is open.
    pub fn splice_ref(&self) -> Option<FlowId> {
        (self.phase != Phase::Closed).then_some(self.splice)
    }

    /// Bytes sent to the app and not yet acknowledged.
    pub fn in_flight(&self) -> u32 {
        self.snd_nxt.wrapping_sub(self.snd_una)
    }

    /// Whether external data may be fed to this flow now.
    pub fn accepts_external_data(&self) -> bool {
        matches!(self.phase, Phase::Established | Phase::FinWaitRemote)
    }

    /// Phase with the sub-state the transition table distinguishes.
    pub fn table_state(&self) -> String {
        match self.phase {
            Phase::SynSeen if self.syn_ack_sent => "SYN_SEEN/answered".into(),
            Phase::SynSeen => "SYN_SEEN/pending".into(),
            Phase::FinWaitLocal if self.fin_acked => "FIN_WAIT_LOCAL/acked".into(),
            Phase::FinWaitLocal => "FIN_WAIT_LOCAL/unacked".into(),
            p => p.to_string(),
        }
    }

    fn segment(&self, seq: u32, flags: TcpFlags) -> TcpSegment {
        TcpSegment::new(self.key.dst_port, self.key.src_port, seq, self.rcv_nxt, flags)
            .with_window(self.advertised_window)
    }

    fn ack_segment(&self) -> TcpSegment {
        self.segment(self.snd_nxt, TcpFlags::ACK)
    }

    fn syn_ack_segment(&self) -> TcpSegment {
        self.segment(self.iss, TcpFlags::SYN | TcpFlags::ACK).with_mss(self.local_mss)
    }

    fn reset_segment(&self) -> TcpSegment {
        self.segment(self.snd_nxt, TcpFlags::RST | TcpFlags::ACK)
    }

    fn accept_ack(&mut self, seg: &TcpSegment) {
        if !seg.flags.ack() {
            return;
        }
        if seq_lt(self.snd_una, seg.ack) && seq_le(seg.ack, self.snd_nxt) {
            self.snd_una = seg.ack;
        }
        if seq_le(self.snd_una, seg.ack) && seq_le(seg.ack, self.snd_nxt) {
            self.peer_window = seg.window;
        }
        if self.fin_sent && self.snd_una == self.snd_nxt {
            self.fin_acked = true;
        }
    }

    /// Apply a segment that arrived from the app.
    pub fn on_tunnel_segment(&self, seg: &TcpSegment) -> Transition {
        let mut next = self.clone();
        let mut actions = Vec::new();
        let fault = next.tunnel_step(seg, &mut actions);
        Transition { state: next, actions, fault }
    }

    /// Apply an event from the external connection.
    pub fn on_external_event(&self, ev: &ExternalEvent) -> Transition {
        let mut next = self.clone();
        let mut actions = Vec::new();
        let fault = next.external_step(ev, &mut actions);
        Transition { state: next, actions, fault }
    }

    /// Local teardown requested by the relay itself (shutdown, capacity).
    /// Not part of the published edge list.
    pub fn abort(&self) -> Transition {
        let mut next = self.clone();
        let mut actions = Vec::new();
        if self.phase.is_terminal() {
            actions.push(TcpAction::Drop);
        } else {
            actions.push(TcpAction::Reset(self.reset_segment()));
            actions.push(TcpAction::CloseExternal(CloseMode::Abort));
            next.phase = Phase::Aborted;
        }
        Transition { state: next, actions, fault: None }
    }

    fn tunnel_step(&mut self, seg: &TcpSegment, out: &mut Vec<TcpAction>) -> Option<UtcpFault> {
        if seg.flags.rst() {
            if matches!(self.phase, Phase::Closed | Phase::TimeWaitBrief | Phase::Aborted) {
                out.push(TcpAction::Drop);
            } else {
                self.phase = Phase::Aborted;
                out.push(TcpAction::CloseExternal(CloseMode::Abort));
            }
            return None;
        }
        match self.phase {
            Phase::Closed => {
                if seg.flags.syn() && !seg.flags.ack() {
                    self.irs = seg.seq;
                    self.rcv_nxt = seg.seq.wrapping_add(1);
                    self.peer_mss = seg.mss().unwrap_or(DEFAULT_PEER_MSS);
                    self.peer_window = seg.window;
                    self.phase = Phase::SynSeen;
                    out.push(TcpAction::OpenExternal(self.key));
                    None
                } else {
                    out.push(TcpAction::Reset(stray_reset(seg)));
                    Some(UtcpFault::StraySegment)
                }
            }
            Phase::SynSeen => {
                if seg.flags.syn() && !seg.flags.ack() {
                    // retransmitted SYN
                    if self.syn_ack_sent {
                        out.push(TcpAction::EmitSegment(self.syn_ack_segment()));
                    } else {
                        out.push(TcpAction::Drop);
                    }
                    return None;
                }
                if !self.syn_ack_sent || !seg.flags.ack() || seg.ack != self.snd_nxt {
                    out.push(TcpAction::Drop);
                    return None;
                }
                self.snd_una = seg.ack;
                self.peer_window = seg.window;
                self.phase = Phase::Established;
                self.receive(seg, out)
            }
            Phase::Established | Phase::FinWaitLocal => {
                if seg.flags.syn() {
                    out.push(TcpAction::EmitSegment(self.ack_segment()));
                    return None;
                }
                self.accept_ack(seg);
                self.receive(seg, out)
            }
            Phase::FinWaitRemote | Phase::Closing => {
                if seg.flags.syn() {
                    out.push(TcpAction::EmitSegment(self.ack_segment()));
                    return None;
                }
                self.accept_ack(seg);
                if self.phase == Phase::Closing && self.fin_acked {
                    self.phase = Phase::TimeWaitBrief;
                }
                // the app already closed its half: nothing more is delivered
                if !seg.payload.is_empty() || seg.flags.fin() {
                    out.push(TcpAction::EmitSegment(self.ack_segment()));
                }
                None
            }
            Phase::TimeWaitBrief => {
                if seg.flags.fin() {
                    out.push(TcpAction::EmitSegment(self.ack_segment()));
                } else {
                    out.push(TcpAction::Drop);
                }
                None
            }
            Phase::Aborted => {
                out.push(TcpAction::Drop);
                None
            }
        }
    }

    /// Deliver in-order payload and consume a FIN in ESTABLISHED or FIN_WAIT_LOCAL.
    fn receive(&mut self, seg: &TcpSegment, out: &mut Vec<TcpAction>) -> Option<UtcpFault> {
        if seg.payload.is_empty() && !seg.flags.fin() {
            return None;
        }
        if seg.seq != self.rcv_nxt {
            out.push(TcpAction::EmitSegment(self.ack_segment()));
            return Some(UtcpFault::OutOfOrderSegment { expected: self.rcv_nxt, got: seg.seq });
        }
        if !seg.payload.is_empty() {
            self.rcv_nxt = self.rcv_nxt.wrapping_add(seg.payload.len() as u32);
            out.push(TcpAction::DeliverPayload(seg.payload.clone()));
        }
        if seg.flags.fin() {
            self.rcv_nxt = self.rcv_nxt.wrapping_add(1);
            self.peer_fin = true;
            out.push(TcpAction::EmitSegment(self.ack_segment()));
            out.push(TcpAction::CloseExternal(CloseMode::Half));
            self.phase = match self.phase {
                Phase::FinWaitLocal if self.fin_acked => Phase::TimeWaitBrief,
                Phase::FinWaitLocal => Phase::Closing,
                _ => Phase::FinWaitRemote,
            };
        } else {
            out.push(TcpAction::EmitSegment(self.ack_segment()));
        }
        None
    }

    fn external_step(&mut self, ev: &ExternalEvent, out: &mut Vec<TcpAction>) -> Option<UtcpFault> {
        if self.phase.is_terminal() {
            out.push(TcpAction::Drop);
            return (self.phase == Phase::Closed)
                .then(|| UtcpFault::EventInInvalidPhase { phase: self.phase, event: event_name(ev) });
        }
        match (ev, self.phase) {
            (ExternalEvent::ConnectFailed(_), _) => {
                out.push(TcpAction::Reset(self.reset_segment()));
                self.phase = Phase::Aborted;
                None
            }
            (ExternalEvent::Connected, Phase::SynSeen) if !self.syn_ack_sent => {
                out.push(TcpAction::EmitSegment(self.syn_ack_segment()));
                self.snd_nxt = self.iss.wrapping_add(1);
                self.snd_una = self.iss;
                self.syn_ack_sent = true;
                None
            }
            (ExternalEvent::Data(bytes), Phase::Established | Phase::FinWaitRemote) => {
                let mss = self.peer_mss.max(1) as usize;
                let chunks: Vec<&[u8]> = bytes.chunks(mss).collect();
                let last = chunks.len().saturating_sub(1);
                for (i, chunk) in chunks.into_iter().enumerate() {
                    let flags = if i == last { TcpFlags::ACK | TcpFlags::PSH } else { TcpFlags::ACK };
                    let seg = self.segment(self.snd_nxt, flags).with_payload(chunk.to_vec());
                    self.snd_nxt = self.snd_nxt.wrapping_add(chunk.len() as u32);
                    out.push(TcpAction::EmitSegment(seg));
                }
                None
            }
            (ExternalEvent::PeerClosed, Phase::Established | Phase::FinWaitRemote) => {
                let seg = self.segment(self.snd_nxt, TcpFlags::FIN | TcpFlags::ACK);
                self.snd_nxt = self.snd_nxt.wrapping_add(1);
                self.fin_sent = true;
                self.phase = if self.phase == Phase::Established { Phase::FinWaitLocal } else { Phase::Closing };
                out.push(TcpAction::EmitSegment(seg));
                None
            }
            (ev, phase) => {
                out.push(TcpAction::Reset(self.reset_segment()));
                out.push(TcpAction::CloseExternal(CloseMode::Abort));
                self.phase = Phase::Aborted;
                Some(UtcpFault::EventInInvalidPhase { phase, event: event_name(ev) })
            }
        }
    }
}

fn event_name(ev: &ExternalEvent) -> &'static str {
    match ev {
        ExternalEvent::Connected => "CONNECTED",
        ExternalEvent::Data(_) => "DATA",
        ExternalEvent::PeerClosed => "PEER_CLOSED",
        ExternalEvent::ConnectFailed(_) => "CONNECT_FAILED",
    }
}

/// RST answering a segment that matches no flow (RFC 793 reset generation).
pub fn stray_reset(seg: &TcpSegment) -> TcpSegment {
    if seg.flags.ack() {
        TcpSegment::new(seg.dst_port, seg.src_port, seg.ack, 0, TcpFlags::RST)
    } else {
        TcpSegment::new(seg.dst_port, seg.src_port, 0, seg.seq.wrapping_add(seg.seq_len()), TcpFlags::RST | TcpFlags::ACK)
    }
}

/// Initial send sequence number derived from `seed`. `initial_sequence(0)`
/// is always `0xA79A_3B6C`.
pub fn initial_sequence(seed: u64) -> u32 {
    ChaCha8Rng::seed_from_u64(seed).next_u32()
}

/// Initial send sequence number from the thread RNG.
pub fn random_initial_sequence() -> u32 {
    rand::thread_rng().gen()
}
