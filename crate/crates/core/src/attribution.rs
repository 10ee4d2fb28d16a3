//! Flow registry and app attribution.
//!
//! Each flow is attributed once, when it is registered, and keeps that
//! [`AppId`] for its lifetime. Flows no resolver can place are filed under
//! [`AppId::unknown`] so totals are preserved.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::net::{Ipv4Addr, Ipv6Addr};
use std::path::Path;
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::{FlowKey, Transport};
use crate::FlowId;

pub const UNKNOWN_APP: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AppId {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric_id: Option<u32>,
}

impl AppId {
    /// Panics on an empty name.
    pub fn new(name: impl Into<String>) -> Self {
        let name = name.into();
        assert!(!name.is_empty(), "app name must be nonempty");
        AppId { name, numeric_id: None }
    }

    pub fn with_id(mut self, id: u32) -> Self {
        self.numeric_id = Some(id);
        self
    }

    pub fn unknown() -> Self {
        AppId::new(UNKNOWN_APP)
    }

    pub fn is_unknown(&self) -> bool {
        self.name == UNKNOWN_APP
    }
}

impl fmt::Display for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

pub trait AttributionResolver: Send + Sync {
    fn resolve(&self, key: &FlowKey) -> Option<AppId>;
}

/// Resolves nothing; every flow becomes "unknown".
#[derive(Debug, Default, Clone)]
pub struct NullResolver;

impl AttributionResolver for NullResolver {
    fn resolve(&self, _key: &FlowKey) -> Option<AppId> {
        None
    }
}

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("flow {0} is already registered")]
    DuplicateFlow(FlowKey),
    #[error("reading resolver map: {0}")]
    Io(#[from] std::io::Error),
    #[error("resolver map: {0}")]
    BadMap(String),
}

/// Static attribution from a JSON object. Keys may be a full flow key as
/// printed by `FlowKey`'s `Display` (`"tcp 10.0.0.2:43512 -> 31.13.79.251:443"`),
/// an app socket (`"10.0.0.2:43512"`), or a bare app port (`"43512"`).
/// More specific keys win.
#[derive(Debug, Default, Clone)]
pub struct MapResolver {
    by_key: HashMap<String, String>,
    by_socket: HashMap<(Ipv4Addr, u16), String>,
    by_port: HashMap<u16, String>,
}

impl MapResolver {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, AttributionError> {
        let mut r = MapResolver::default();
        for (k, name) in map {
            if name.is_empty() {
                return Err(AttributionError::BadMap(format!("empty app name for {k:?}")));
            }
            if let Ok(port) = k.parse::<u16>() {
                r.by_port.insert(port, name.clone());
            } else if let Ok(sock) = k.parse::<std::net::SocketAddrV4>() {
                r.by_socket.insert((*sock.ip(), sock.port()), name.clone());
            } else if k.contains("->") {
                r.by_key.insert(k.trim().to_string(), name.clone());
            } else {
                return Err(AttributionError::BadMap(format!("unrecognized key {k:?}")));
            }
        }
        Ok(r)
    }

    pub fn from_json(text: &str) -> Result<Self, AttributionError> {
        let map: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|e| AttributionError::BadMap(e.to_string()))?;
        Self::from_map(&map)
    }

    pub fn from_file(path: &Path) -> Result<Self, AttributionError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl AttributionResolver for MapResolver {
    fn resolve(&self, key: &FlowKey) -> Option<AppId> {
        self.by_key
            .get(&key.to_string())
            .or_else(|| self.by_socket.get(&(key.src_addr, key.src_port)))
            .or_else(|| self.by_port.get(&key.src_port))
            .map(|n| AppId::new(n.clone()))
    }
}

/// Attribution through the operating system's socket owner tables.
///
/// On Linux this reads `/proc/net/{tcp,udp}{,6}` for the socket inode bound
/// to the flow's app-side endpoint, then finds the process holding that
/// inode under `/proc/<pid>/fd`. Other platforms resolve nothing.
#[derive(Debug, Clone)]
pub struct PlatformResolver {
    proc_root: std::path::PathBuf,
    retry_delay: Duration,
}

pub fn platform_resolver() -> Box<dyn AttributionResolver> {
    if cfg!(target_os = "linux") && Path::new("/proc/net/tcp").exists() {
        Box::new(PlatformResolver { proc_root: "/proc".into(), retry_delay: Duration::from_millis(10) })
    } else {
        Box::new(NullResolver)
    }
}

impl PlatformResolver {
    fn socket_inode(&self, key: &FlowKey) -> Option<u64> {
        let base = match key.protocol {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
        };
        let mut fallback = None;
        for table in [base.to_string(), format!("{base}6")] {
            let Ok(text) = fs::read_to_string(self.proc_root.join("net").join(&table)) else {
                continue;
            };
            for entry in text.lines().skip(1).filter_map(parse_socket_line) {
                if entry.inode == 0 || entry.local_port != key.src_port {
                    continue;
                }
                let local_match = entry.local_addr == key.src_addr || entry.local_addr.is_unspecified();
                if !local_match {
                    continue;
                }
                if entry.remote_addr == key.dst_addr && entry.remote_port == key.dst_port {
                    return Some(entry.inode);
                }
                fallback.get_or_insert(entry.inode);
            }
        }
        fallback
    }

    fn owner_of(&self, inode: u64) -> Option<AppId> {
        let needle = format!("socket:[{inode}]");
        for proc_entry in fs::read_dir(&self.proc_root).ok()?.flatten() {
            let Some(pid) = proc_entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
                continue;
            };
            let Ok(fds) = fs::read_dir(proc_entry.path().join("fd")) else {
                continue;
            };
            let owns = fds.flatten().any(|fd| {
                fs::read_link(fd.path()).map(|t| t.as_os_str() == needle.as_str()).unwrap_or(false)
            });
            if owns {
                let comm = fs::read_to_string(proc_entry.path().join("comm")).ok()?;
                let name = comm.trim();
                if name.is_empty() {
                    return None;
                }
                return Some(AppId::new(name).with_id(pid));
            }
        }
        None
    }

    fn lookup(&self, key: &FlowKey) -> Option<AppId> {
        self.socket_inode(key).and_then(|inode| self.owner_of(inode))
    }
}

impl AttributionResolver for PlatformResolver {
    fn resolve(&self, key: &FlowKey) -> Option<AppId> {
        self.lookup(key).or_else(|| {
            // the owner table may lag a just-issued connect
            std::thread::sleep(self.retry_delay);
            self.lookup(key)
        })
    }
}

struct SocketLine {
    local_addr: Ipv4Addr,
    local_port: u16,
    remote_addr: Ipv4Addr,
    remote_port: u16,
    inode: u64,
}

fn parse_socket_line(line: &str) -> Option<SocketLine> {
    let cols: Vec<&str> = line.split_whitespace().collect();
    if cols.len() < 10 {
        return None;
    }
    let (local_addr, local_port) = parse_proc_endpoint(cols[1])?;
    let (remote_addr, remote_port) = parse_proc_endpoint(cols[2])?;
    let inode = cols[9].parse().ok()?;
    Some(SocketLine { local_addr, local_port, remote_addr, remote_port, inode })
}

/// `0100007F:1F90` style endpoints. Addresses are the in-memory network
/// byte sequence printed as native-endian 32-bit words.
fn parse_proc_endpoint(s: &str) -> Option<(Ipv4Addr, u16)> {
    let (addr, port) = s.split_once(':')?;
    let port = u16::from_str_radix(port, 16).ok()?;
    let ip = match addr.len() {
        8 => Ipv4Addr::from(u32::from_str_radix(addr, 16).ok()?.to_ne_bytes()),
        32 => {
            let mut bytes = [0u8; 16];
            for i in 0..4 {
                let w = u32::from_str_radix(&addr[i * 8..i * 8 + 8], 16).ok()?;
                bytes[i * 4..i * 4 + 4].copy_from_slice(&w.to_ne_bytes());
            }
            let v6 = Ipv6Addr::from(bytes);
            if v6.is_unspecified() {
                Ipv4Addr::UNSPECIFIED
            } else {
                v6.to_ipv4_mapped()?
            }
        }
        _ => return None,
    };
    Some((ip, port))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisteredFlow {
    pub id: FlowId,
    pub app: AppId,
    /// Virtual or monotonic nanoseconds after which the entry may be removed.
    pub deadline_ns: Option<u64>,
}

/// Live flows keyed by tunnel-direction [`FlowKey`].
#[derive(Debug, Default)]
pub struct FlowRegistry {
    flows: RwLock<BTreeMap<FlowKey, RegisteredFlow>>,
}

impl FlowRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Attribute and insert a new flow. The resolver is consulted once.
    pub fn register_flow(
        &self,
        key: FlowKey,
        id: FlowId,
        resolver: &dyn AttributionResolver,
    ) -> Result<AppId, AttributionError> {
        if self.flows.read().unwrap().contains_key(&key) {
            return Err(AttributionError::DuplicateFlow(key));
        }
        let app = resolver.resolve(&key).unwrap_or_else(AppId::unknown);
        let mut flows = self.flows.write().unwrap();
        if flows.contains_key(&key) {
            return Err(AttributionError::DuplicateFlow(key));
        }
        flows.insert(key, RegisteredFlow { id, app: app.clone(), deadline_ns: None });
        Ok(app)
    }

    pub fn lookup(&self, key: &FlowKey) -> Option<RegisteredFlow> {
        self.flows.read().unwrap().get(key).cloned()
    }

    /// Lookup accepting either direction of the flow.
    pub fn lookup_normalized(&self, key: &FlowKey) -> Option<(FlowKey, RegisteredFlow)> {
        let flows = self.flows.read().unwrap();
        if let Some(f) = flows.get(key) {
            return Some((*key, f.clone()));
        }
        let rev = key.reversed();
        flows.get(&rev).map(|f| (rev, f.clone()))
    }

    pub fn set_deadline(&self, key: &FlowKey, deadline_ns: Option<u64>) {
        if let Some(f) = self.flows.write().unwrap().get_mut(key) {
            f.deadline_ns = deadline_ns;
        }
    }

    pub fn remove(&self, key: &FlowKey) -> Option<RegisteredFlow> {
        self.flows.write().unwrap().remove(key)
    }

    /// Remove every entry whose deadline is at or before `now_ns`.
    pub fn expire_flows(&self, now_ns: u64) -> Vec<(FlowKey, RegisteredFlow)> {
        let mut flows = self.flows.write().unwrap();
        let due: Vec<FlowKey> = flows
            .iter()
            .filter(|(_, f)| f.deadline_ns.is_some_and(|d| d <= now_ns))
            .map(|(k, _)| *k)
            .collect();
        due.into_iter().map(|k| (k, flows.remove(&k).unwrap())).collect()
    }

    pub fn next_deadline(&self) -> Option<u64> {
        self.flows.read().unwrap().values().filter_map(|f| f.deadline_ns).min()
    }

    pub fn len(&self) -> usize {
        self.flows.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
