//! Everything observable from one simulation run.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

use super::app::AppPhase;
use super::scenario::ClientAction;
use super::upstream::ExternalRecord;
use crate::diag::FailureRecord;
use crate::net_io::{CaptureWriter, NetIoError, LINKTYPE_RAW};
use crate::packet::FlowKey;
use crate::relay::{FlowTrace, RelayCounters};
use crate::rtt::{RttSample, SampleOutcome};
use crate::FlowId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TunnelRecord {
    pub t_ns: u64,
    /// Written by the app (true) or by the relay (false).
    pub to_relay: bool,
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OracleCheck {
    pub key: FlowKey,
    pub endpoint: Option<String>,
    pub oracle_rtt_ns: Option<u64>,
    pub measured_rtt_ns: u64,
    pub outcome: SampleOutcome,
}

impl OracleCheck {
    /// Measured minus scripted RTT for successful handshakes.
    pub fn error_ns(&self) -> Option<i64> {
        match (self.outcome, self.oracle_rtt_ns) {
            (SampleOutcome::Success, Some(o)) => Some(self.measured_rtt_ns as i64 - o as i64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AppFlowReport {
    pub flow: String,
    pub key: FlowKey,
    pub phase: AppPhase,
    pub handshake_ns: Option<u64>,
    pub reset_by_peer: bool,
    pub sent_len: u64,
    pub acked_all: bool,
    pub received_len: u64,
    pub last_rx_ns: Option<u64>,
    pub peer_fin: bool,
    pub retransmissions: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UdpReport {
    pub key: FlowKey,
    pub sent: u64,
    pub received: u64,
}

/// (sent, received) datagrams.
pub type UdpExchange = (Vec<Vec<u8>>, Vec<Vec<u8>>);

#[derive(Debug, Clone, Serialize)]
pub struct TraceBundle {
    pub seed: u64,
    pub end_time_ns: u64,
    pub samples: Vec<RttSample>,
    pub failures: Vec<FailureRecord>,
    pub flows: Vec<FlowTrace>,
    pub apps: Vec<AppFlowReport>,
    pub udp: Vec<UdpReport>,
    pub external: Vec<ExternalRecord>,
    pub tunnel: Vec<TunnelRecord>,
    pub oracle: Vec<OracleCheck>,
    pub counters: RelayCounters,
    /// Bytes each relay flow sent to the outside.
    #[serde(skip)]
    pub external_streams: BTreeMap<FlowId, Vec<u8>>,
    #[serde(skip)]
    pub external_datagrams: BTreeMap<FlowId, Vec<Vec<u8>>>,
    /// Bytes each scripted server received.
    #[serde(skip)]
    pub server_rx: BTreeMap<FlowId, Vec<u8>>,
    /// (sent, received) per scripted client flow.
    #[serde(skip)]
    pub app_streams: BTreeMap<String, (Vec<u8>, Vec<u8>)>,
    /// (sent, received) datagrams per app-side UDP key.
    #[serde(skip)]
    pub udp_payloads: BTreeMap<FlowKey, UdpExchange>,
    #[serde(skip)]
    pub script: Vec<ClientAction>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line<'a> {
    Run { seed: u64, end_time_ns: u64, counters: &'a RelayCounters },
    Sample(&'a RttSample),
    Failure(&'a FailureRecord),
    Oracle(&'a OracleCheck),
    Flow(&'a FlowTrace),
    App(&'a AppFlowReport),
    Udp(&'a UdpReport),
    External(&'a ExternalRecord),
    Tunnel { t_ns: u64, to_relay: bool, len: usize, hex: String },
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl TraceBundle {
    pub fn sample_for(&self, flow: &str) -> Option<&RttSample> {
        let key = self.apps.iter().find(|a| a.flow == flow)?.key;
        self.samples.iter().rev().find(|s| s.key == key)
    }

    pub fn app(&self, flow: &str) -> Option<&AppFlowReport> {
        self.apps.iter().find(|a| a.flow == flow)
    }

    pub fn flow_trace(&self, flow: &str) -> Option<&FlowTrace> {
        let key = self.app(flow)?.key;
        self.flows.iter().rev().find(|t| t.key == key)
    }

    /// One JSON object per line: run header, then every record kind.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut put = |line: Line| -> io::Result<()> {
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")
        };
        put(Line::Run { seed: self.seed, end_time_ns: self.end_time_ns, counters: &self.counters })?;
        self.samples.iter().try_for_each(|s| put(Line::Sample(s)))?;
        self.failures.iter().try_for_each(|f| put(Line::Failure(f)))?;
        self.oracle.iter().try_for_each(|o| put(Line::Oracle(o)))?;
        self.flows.iter().try_for_each(|f| put(Line::Flow(f)))?;
        self.apps.iter().try_for_each(|a| put(Line::App(a)))?;
        self.udp.iter().try_for_each(|u| put(Line::Udp(u)))?;
        self.external.iter().try_for_each(|e| put(Line::External(e)))?;
        for t in &self.tunnel {
            put(Line::Tunnel { t_ns: t.t_ns, to_relay: t.to_relay, len: t.bytes.len(), hex: hex(&t.bytes) })?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    /// Tunnel traffic as a raw-IP capture file, in relay-side time order.
    pub fn write_capture(&self, path: &Path) -> Result<(), NetIoError> {
        let mut w = CaptureWriter::create(path, LINKTYPE_RAW)?;
        let mut order: Vec<&TunnelRecord> = self.tunnel.iter().collect();
        order.sort_by_key(|t| t.t_ns);
        for t in order {
            w.write_record(t.t_ns, &t.bytes)?;
        }
        w.finish()?;
        Ok(())
    }
}
