use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};

use serde::{Deserialize, Serialize};

use super::ipv4::{IpProtocol, Ipv4Packet};
use super::PacketError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

/// 5-tuple identity of a relayed flow. Keys built from tunnel-origin
/// packets keep the app's endpoint as the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub protocol: Transport,
    pub src_addr: Ipv4Addr,
    pub src_port: u16,
    pub dst_addr: Ipv4Addr,
    pub dst_port: u16,
}

impl FlowKey {
    pub fn new(protocol: Transport, src: SocketAddrV4, dst: SocketAddrV4) -> Self {
        FlowKey {
            protocol,
            src_addr: *src.ip(),
            src_port: src.port(),
            dst_addr: *dst.ip(),
            dst_port: dst.port(),
        }
    }

    pub fn src(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.src_addr, self.src_port)
    }

    pub fn dst(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.dst_addr, self.dst_port)
    }

    pub fn reversed(&self) -> FlowKey {
        FlowKey {
            protocol: self.protocol,
            src_addr: self.dst_addr,
            src_port: self.dst_port,
            dst_addr: self.src_addr,
            dst_port: self.src_port,
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let proto = match self.protocol {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
        };
        write!(f, "{proto} {} -> {}", self.src(), self.dst())
    }
}

/// Key for a TCP or UDP packet, read from the transport header's port words.
pub fn flow_key_of(pkt: &Ipv4Packet) -> Result<FlowKey, PacketError> {
    let protocol = match pkt.protocol {
        IpProtocol::Tcp => Transport::Tcp,
        IpProtocol::Udp => Transport::Udp,
        IpProtocol::Other(c) => return Err(PacketError::UnsupportedProtocol(c)),
    };
    let p = &pkt.payload;
    if p.len() < 4 {
        return Err(PacketError::TruncatedSegment { needed: 4, available: p.len() });
    }
    Ok(FlowKey {
        protocol,
        src_addr: pkt.src_addr,
        src_port: u16::from_be_bytes([p[0], p[1]]),
        dst_addr: pkt.dst_addr,
        dst_port: u16::from_be_bytes([p[2], p[3]]),
    })
}
