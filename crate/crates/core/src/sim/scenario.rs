//! Scenario files: scripted endpoints plus a client script.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::SimError;

/// Milliseconds to whole nanoseconds.
pub fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tag")]
    pub network_tag: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: f64,
    /// One-way delay between the app and the relay.
    #[serde(default)]
    pub tunnel_delay_ms: f64,
    #[serde(default = "default_app_addr")]
    pub app_addr: Ipv4Addr,
    pub endpoints: Vec<EndpointSpec>,
    /// Attribution map handed to the relay, as for `MapResolver`.
    #[serde(default)]
    pub apps: BTreeMap<String, String>,
    #[serde(default)]
    pub client_script: Vec<ClientAction>,
    /// Stop the run at this virtual time even if events remain.
    #[serde(default)]
    pub max_time_ms: Option<f64>,
    #[serde(default)]
    pub bogus_dns: Option<BTreeSet<Ipv4Addr>>,
}

fn default_tag() -> String {
    "sim".into()
}

fn default_timeout_ms() -> f64 {
    3000.0
}

fn default_app_addr() -> Ipv4Addr {
    Ipv4Addr::new(10, 0, 0, 2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSpec {
    pub addr: SocketAddrV4,
    #[serde(default)]
    pub label: Option<String>,
    pub behavior: Behavior,
}

impl EndpointSpec {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.addr.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Complete handshakes after `rtt_ms` (or twice `one_way_ms`).
    Accept {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rtt_ms: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        one_way_ms: Option<f64>,
        #[serde(default)]
        mode: ServerMode,
    },
    /// Answer SYNs with RST after `rtt_ms`.
    Refuse {
        #[serde(default)]
        rtt_ms: f64,
    },
    /// Never answer.
    Blackhole,
    /// Lose each SYN with `probability`, otherwise accept and echo.
    Drop {
        probability: f64,
        seed: u64,
        #[serde(default)]
        rtt_ms: f64,
    },
    /// DNS server for A queries; names not listed get NXDOMAIN.
    Dns {
        #[serde(default)]
        rtt_ms: f64,
        #[serde(default)]
        records: BTreeMap<String, Vec<Ipv4Addr>>,
    },
    /// Echo every datagram back.
    UdpEcho {
        #[serde(default)]
        rtt_ms: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerMode {
    #[default]
    Echo,
    Sink,
    /// Send these steps right after accepting, then behave as a sink.
    Script(Vec<ServerStep>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerStep {
    Send(usize),
    SendText(String),
    Close,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAction {
    #[serde(default)]
    pub at_ms: f64,
    #[serde(flatten)]
    pub op: ClientOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientOp {
    Open {
        flow: String,
        dst: SocketAddrV4,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        src_port: Option<u16>,
    },
    Send {
        flow: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        len: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
    },
    Close {
        flow: String,
    },
    Reset {
        flow: String,
    },
    Udp {
        dst: SocketAddrV4,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        src_port: Option<u16>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dns_query: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        len: Option<usize>,
    },
}

impl ClientAction {
    pub fn at(at_ms: f64, op: ClientOp) -> Self {
        ClientAction { at_ms, op }
    }
}

impl Behavior {
    /// Scripted handshake round trip, where one is defined.
    pub fn handshake_ns(&self) -> Option<u64> {
        match self {
            Behavior::Accept { rtt_ms: Some(r), .. } => Some(ms_to_ns(*r)),
            Behavior::Accept { one_way_ms: Some(w), .. } => Some(2 * ms_to_ns(*w)),
            Behavior::Accept { .. } => None,
            Behavior::Refuse { rtt_ms } | Behavior::Drop { rtt_ms, .. } => Some(ms_to_ns(*rtt_ms)),
            Behavior::Dns { rtt_ms, .. } | Behavior::UdpEcho { rtt_ms } => Some(ms_to_ns(*rtt_ms)),
            Behavior::Blackhole => None,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::ScenarioInvalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_nanos(ms_to_ns(self.timeout_ms))
    }

    pub fn endpoint(&self, addr: SocketAddrV4) -> Option<&EndpointSpec> {
        self.endpoints.iter().find(|e| e.addr == addr)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ScenarioInvalid(m));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.timeout_ms.is_finite() && self.timeout_ms > 0.0) {
            return bad("timeout_ms must be positive".into());
        }
        if !finite_nonneg(self.tunnel_delay_ms) {
            return bad("tunnel_delay_ms must be nonnegative".into());
        }
        if self.max_time_ms.is_some_and(|m| !finite_nonneg(m)) {
            return bad("max_time_ms must be nonnegative".into());
        }
        let mut seen = BTreeSet::new();
        for ep in &self.endpoints {
            if !seen.insert(ep.addr) {
                return bad(format!("duplicate endpoint {}", ep.addr));
            }
            let delays_ok = match &ep.behavior {
                Behavior::Accept { rtt_ms, one_way_ms, .. } => match (rtt_ms, one_way_ms) {
                    (Some(r), None) => finite_nonneg(*r),
                    (None, Some(w)) => finite_nonneg(*w),
                    _ => return bad(format!("endpoint {}: give exactly one of rtt_ms and one_way_ms", ep.addr)),
                },
                Behavior::Drop { probability, rtt_ms, .. } => {
                    (0.0..=1.0).contains(probability) && finite_nonneg(*rtt_ms)
                }
                Behavior::Refuse { rtt_ms } | Behavior::Dns { rtt_ms, .. } | Behavior::UdpEcho { rtt_ms } => {
                    finite_nonneg(*rtt_ms)
                }
                Behavior::Blackhole => true,
            };
            if !delays_ok {
                return bad(format!("endpoint {}: delays must be finite and nonnegative", ep.addr));
            }
        }
        let mut flows = BTreeSet::new();
        let mut last_at = 0.0;
        for (i, a) in self.client_script.iter().enumerate() {
            if !finite_nonneg(a.at_ms) {
                return bad(format!("client_script[{i}]: at_ms must be nonnegative"));
            }
            if a.at_ms < last_at {
                return bad(format!("client_script[{i}]: actions must be in time order"));
            }
            last_at = a.at_ms;
            match &a.op {
                ClientOp::Open { flow, .. } => {
                    if !flows.insert(flow.clone()) {
                        return bad(format!("client_script[{i}]: flow {flow:?} opened twice"));
                    }
                }
                ClientOp::Send { flow, len, text } => {
                    if !flows.contains(flow) {
                        return bad(format!("client_script[{i}]: flow {flow:?} used before open"));
                    }
                    if len.is_some() == text.is_some() {
                        return bad(format!("client_script[{i}]: send needs exactly one of len and text"));
                    }
                }
                ClientOp::Close { flow } | ClientOp::Reset { flow } => {
                    if !flows.contains(flow) {
                        return bad(format!("client_script[{i}]: flow {flow:?} used before open"));
                    }
                }
                ClientOp::Udp { dns_query, text, len, .. } => {
                    let given = [dns_query.is_some(), text.is_some(), len.is_some()].iter().filter(|b| **b).count();
                    if given != 1 {
                        return bad(format!("client_script[{i}]: udp needs exactly one of dns_query, text, len"));
                    }
                }
            }
        }
        Ok(())
    }
}
