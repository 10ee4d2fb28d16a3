//! Zero-injection audit: everything that left the simulated host must be
//! explained by something the scripted app did.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::scenario::ClientOp;
use super::trace::TraceBundle;
use super::upstream::ExternalOp;
use crate::packet::{FlowKey, Transport};
use crate::FlowId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub external_records: usize,
    pub external_bytes: u64,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn audit_zero_injection(b: &TraceBundle) -> AuditReport {
    let mut violations = Vec::new();
    let keys: BTreeMap<FlowId, FlowKey> = b.flows.iter().map(|f| (f.id, f.key)).collect();
    let mut opens: BTreeMap<FlowKey, Vec<&str>> = BTreeMap::new();
    for a in &b.apps {
        opens.entry(a.key).or_default().push(&a.flow);
    }
    let closed: BTreeSet<&str> = b
        .script
        .iter()
        .filter_map(|a| match &a.op {
            ClientOp::Close { flow } => Some(flow.as_str()),
            _ => None,
        })
        .collect();
    let mut used: BTreeMap<FlowKey, usize> = BTreeMap::new();
    let mut owner: BTreeMap<FlowId, &str> = BTreeMap::new();
    let mut udp_seen: BTreeMap<FlowId, usize> = BTreeMap::new();
    let mut bytes = 0u64;

    for rec in &b.external {
        let Some(key) = keys.get(&rec.id) else {
            violations.push(format!("{} at {} ns: no relay flow with this id", rec.id, rec.t_ns));
            continue;
        };
        match &rec.op {
            ExternalOp::Connect { dst } => {
                if key.protocol != Transport::Tcp || key.dst() != *dst {
                    violations.push(format!("{}: connect to {dst} does not match {key}", rec.id));
                    continue;
                }
                let n = used.entry(*key).or_default();
                match opens.get(key).and_then(|v| v.get(*n)) {
                    Some(flow) => {
                        owner.insert(rec.id, flow);
                        *n += 1;
                    }
                    None => violations.push(format!("{}: connect to {dst} without a client open", rec.id)),
                }
            }
            ExternalOp::Data { len, .. } => {
                bytes += len;
                if !owner.contains_key(&rec.id) {
                    violations.push(format!("{}: data on a flow that never connected", rec.id));
                }
            }
            ExternalOp::Fin => match owner.get(&rec.id) {
                Some(flow) if closed.contains(flow) => {}
                Some(flow) => violations.push(format!("{}: FIN but {flow} never closed", rec.id)),
                None => violations.push(format!("{}: FIN on a flow that never connected", rec.id)),
            },
            ExternalOp::Close => {
                if !owner.contains_key(&rec.id) {
                    violations.push(format!("{}: close on a flow that never connected", rec.id));
                }
            }
            ExternalOp::Udp { dst, len } => {
                bytes += len;
                if key.protocol != Transport::Udp || key.dst() != *dst {
                    violations.push(format!("{}: datagram to {dst} does not match {key}", rec.id));
                    continue;
                }
                let i = udp_seen.entry(rec.id).or_default();
                let sent = b.external_datagrams.get(&rec.id).and_then(|d| d.get(*i));
                *i += 1;
                let app_sent = b.udp_payloads.get(key).map(|(s, _)| s.as_slice()).unwrap_or(&[]);
                if !sent.is_some_and(|d| app_sent.contains(d)) {
                    violations.push(format!("{}: datagram to {dst} the app never sent", rec.id));
                }
            }
        }
    }

    for (id, flow) in &owner {
        let out = b.external_streams.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let app_sent = b.app_streams.get(*flow).map(|(s, _)| s.as_slice()).unwrap_or(&[]);
        if !app_sent.starts_with(out) {
            violations.push(format!("{id}: {} bytes sent outward are not a prefix of what {flow} wrote", out.len()));
        }
    }

    AuditReport { external_records: b.external.len(), external_bytes: bytes, violations }
}
