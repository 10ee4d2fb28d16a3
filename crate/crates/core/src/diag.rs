//! Failure classification and DNS answer inspection.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::AppId;
use crate::packet::FlowKey;
use crate::rtt::ConnectOutcome;

pub const DNS_TYPE_A: u16 = 1;
pub const DNS_CLASS_IN: u16 = 1;
pub const RCODE_NXDOMAIN: u8 = 3;

/// The resolver address that misconfigured carrier DNS handed out for
/// unregistered names.
pub const DEFAULT_BOGUS_ADDR: Ipv4Addr = Ipv4Addr::new(1, 1, 1, 1);

pub fn default_bogus_set() -> BTreeSet<Ipv4Addr> {
    BTreeSet::from([DEFAULT_BOGUS_ADDR])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureClass {
    Timeout,
    Refused,
    Unreachable,
    DnsMisconfig,
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureClass::Timeout => "TIMEOUT",
            FailureClass::Refused => "REFUSED",
            FailureClass::Unreachable => "UNREACHABLE",
            FailureClass::DnsMisconfig => "DNS_MISCONFIG",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub key: FlowKey,
    pub app: AppId,
    pub class: FailureClass,
    pub evidence: String,
    pub wall_time: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsAnswerSummary {
    pub query_name: String,
    pub answer_addresses: Vec<Ipv4Addr>,
    pub response_code: u8,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DnsError {
    #[error("malformed DNS message: {0}")]
    MalformedDns(&'static str),
}

struct Reader<'a> {
    msg: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, DnsError> {
        let b = *self.msg.get(self.pos).ok_or(DnsError::MalformedDns("truncated"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, DnsError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn skip(&mut self, n: usize) -> Result<(), DnsError> {
        if self.pos + n > self.msg.len() {
            return Err(DnsError::MalformedDns("truncated"));
        }
        self.pos += n;
        Ok(())
    }

    /// Read a possibly compressed name, leaving `pos` after its in-place part.
    fn name(&mut self) -> Result<String, DnsError> {
        let mut labels: Vec<String> = Vec::new();
        let mut pos = self.pos;
        let mut resume = None;
        let mut jumps = 0;
        loop {
            let len = *self.msg.get(pos).ok_or(DnsError::MalformedDns("truncated name"))? as usize;
            match len & 0xC0 {
                0x00 if len == 0 => {
                    pos += 1;
                    break;
                }
                0x00 => {
                    let label = self
                        .msg
                        .get(pos + 1..pos + 1 + len)
                        .ok_or(DnsError::MalformedDns("truncated label"))?;
                    labels.push(String::from_utf8_lossy(label).to_ascii_lowercase());
                    pos += 1 + len;
                }
                0xC0 => {
                    let lo = *self.msg.get(pos + 1).ok_or(DnsError::MalformedDns("truncated pointer"))? as usize;
                    let target = ((len & 0x3F) << 8) | lo;
                    jumps += 1;
                    if jumps > 64 || target >= self.msg.len() {
                        return Err(DnsError::MalformedDns("bad compression pointer"));
                    }
                    resume.get_or_insert(pos + 2);
                    pos = target;
                }
                _ => return Err(DnsError::MalformedDns("reserved label type")),
            }
        }
        self.pos = resume.unwrap_or(pos);
        Ok(labels.join("."))
    }
}

/// Decode the question name, response code and A/IN answers of a DNS message.
pub fn inspect_dns(payload: &[u8]) -> Result<DnsAnswerSummary, DnsError> {
    if payload.len() < 12 {
        return Err(DnsError::MalformedDns("header shorter than 12 bytes"));
    }
    let mut r = Reader { msg: payload, pos: 4 };
    let response_code = payload[3] & 0x0F;
    let qdcount = r.u16()?;
    let ancount = r.u16()?;
    r.skip(4)?;
    let mut summary = DnsAnswerSummary { response_code, ..Default::default() };
    for i in 0..qdcount {
        let name = r.name()?;
        r.skip(4)?;
        if i == 0 {
            summary.query_name = name;
        }
    }
    for _ in 0..ancount {
        r.name()?;
        let rtype = r.u16()?;
        let class = r.u16()?;
        r.skip(4)?;
        let rdlen = r.u16()? as usize;
        let start = r.pos;
        r.skip(rdlen)?;
        if rtype == DNS_TYPE_A && class == DNS_CLASS_IN && rdlen == 4 {
            let d = &payload[start..start + 4];
            summary.answer_addresses.push(Ipv4Addr::new(d[0], d[1], d[2], d[3]));
        }
    }
    Ok(summary)
}

/// Flow and attribution a DNS response travelled on.
#[derive(Debug, Clone)]
pub struct RecordContext {
    pub key: FlowKey,
    pub app: AppId,
    pub wall_time: DateTime<Utc>,
}

/// One DNS_MISCONFIG record if any answer is in `bogus`.
pub fn flag_misconfig(
    summary: &DnsAnswerSummary,
    bogus: &BTreeSet<Ipv4Addr>,
    ctx: &RecordContext,
) -> Option<FailureRecord> {
    let hits: Vec<String> =
        summary.answer_addresses.iter().filter(|a| bogus.contains(a)).map(|a| a.to_string()).collect();
    if hits.is_empty() {
        return None;
    }
    Some(FailureRecord {
        key: ctx.key,
        app: ctx.app.clone(),
        class: FailureClass::DnsMisconfig,
        evidence: format!("domain={} answer={}", summary.query_name, hits.join(",")),
        wall_time: ctx.wall_time,
    })
}

/// Class for a failed connect. Anything that took the full timeout is a
/// timeout regardless of how the platform reported it.
///
/// # Panics
/// On `ConnectOutcome::Connected`.
pub fn classify_failure(outcome: ConnectOutcome, elapsed: Duration, connect_timeout: Duration) -> FailureClass {
    assert_ne!(outcome, ConnectOutcome::Connected, "classify_failure needs a failed outcome");
    if elapsed >= connect_timeout {
        return FailureClass::Timeout;
    }
    match outcome {
        ConnectOutcome::Refused => FailureClass::Refused,
        _ => FailureClass::Unreachable,
    }
}

fn push_name(out: &mut Vec<u8>, name: &str) {
    for label in name.split('.').filter(|l| !l.is_empty()) {
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
    }
    out.push(0);
}

/// Standard recursive A query.
pub fn build_dns_query(id: u16, name: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + name.len() + 6);
    out.extend_from_slice(&id.to_be_bytes());
    out.extend_from_slice(&[0x01, 0x00, 0, 1, 0, 0, 0, 0, 0, 0]);
    push_name(&mut out, name);
    out.extend_from_slice(&DNS_TYPE_A.to_be_bytes());
    out.extend_from_slice(&DNS_CLASS_IN.to_be_bytes());
    out
}

/// Response to `query` with the given A answers, names compressed against
/// the question. An empty answer list yields NXDOMAIN.
pub fn build_dns_response(query: &[u8], answers: &[Ipv4Addr]) -> Result<Vec<u8>, DnsError> {
    if query.len() < 12 {
        return Err(DnsError::MalformedDns("header shorter than 12 bytes"));
    }
    let mut r = Reader { msg: query, pos: 12 };
    let name = r.name()?;
    r.skip(4)?;
    let question_end = r.pos;
    let rcode = if answers.is_empty() { RCODE_NXDOMAIN } else { 0 };
    let mut out = Vec::with_capacity(question_end + answers.len() * 16);
    out.extend_from_slice(&query[0..2]);
    out.push(0x81);
    out.push(0x80 | rcode);
    out.extend_from_slice(&[0, 1]);
    out.extend_from_slice(&(answers.len() as u16).to_be_bytes());
    out.extend_from_slice(&[0, 0, 0, 0]);
    push_name(&mut out, &name);
    out.extend_from_slice(&query[question_end - 4..question_end]);
    for a in answers {
        out.extend_from_slice(&[0xC0, 12]);
        out.extend_from_slice(&DNS_TYPE_A.to_be_bytes());
        out.extend_from_slice(&DNS_CLASS_IN.to_be_bytes());
        out.extend_from_slice(&300u32.to_be_bytes());
        out.extend_from_slice(&4u16.to_be_bytes());
        out.extend_from_slice(&a.octets());
    }
    Ok(out)
}
