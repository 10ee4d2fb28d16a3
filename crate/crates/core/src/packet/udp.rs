use std::net::Ipv4Addr;

use super::checksum::transport_checksum;
use super::ipv4::{serialize_ipv4, IpProtocol, Ipv4Packet};
use super::PacketError;

pub const UDP_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpDatagram {
    pub src_port: u16,
    pub dst_port: u16,
    pub length: usize,
    pub checksum: u16,
    pub payload: Vec<u8>,
    pub checksum_ok: bool,
}

impl UdpDatagram {
    pub fn new(src_port: u16, dst_port: u16, payload: Vec<u8>) -> Self {
        UdpDatagram {
            src_port,
            dst_port,
            length: UDP_HEADER_LEN + payload.len(),
            checksum: 0,
            payload,
            checksum_ok: true,
        }
    }

    pub fn to_bytes(&self, src: Ipv4Addr, dst: Ipv4Addr) -> Result<Vec<u8>, PacketError> {
        let len = UDP_HEADER_LEN + self.payload.len();
        if len > u16::MAX as usize {
            return Err(PacketError::FieldOverflow("udp payload"));
        }
        let mut out = Vec::with_capacity(len);
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&(len as u16).to_be_bytes());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.payload);
        let mut csum = transport_checksum(src, dst, IpProtocol::Udp.code(), &out);
        // zero means "no checksum" on the wire
        if csum == 0 {
            csum = 0xffff;
        }
        out[6..8].copy_from_slice(&csum.to_be_bytes());
        Ok(out)
    }
}

/// Decode the UDP datagram carried by `ip`. A zero checksum field means the
/// sender did not compute one and is accepted.
pub fn parse_udp(ip: &Ipv4Packet) -> Result<UdpDatagram, PacketError> {
    if ip.protocol != IpProtocol::Udp {
        return Err(PacketError::UnsupportedProtocol(ip.protocol.code()));
    }
    let raw = &ip.payload;
    if raw.len() < UDP_HEADER_LEN {
        return Err(PacketError::TruncatedSegment { needed: UDP_HEADER_LEN, available: raw.len() });
    }
    let length = u16::from_be_bytes([raw[4], raw[5]]) as usize;
    if length < UDP_HEADER_LEN || length > raw.len() {
        return Err(PacketError::TruncatedSegment { needed: length.max(UDP_HEADER_LEN), available: raw.len() });
    }
    let checksum = u16::from_be_bytes([raw[6], raw[7]]);
    let body = &raw[..length];
    let checksum_ok = checksum == 0 || transport_checksum(ip.src_addr, ip.dst_addr, IpProtocol::Udp.code(), body) == 0;
    Ok(UdpDatagram {
        src_port: u16::from_be_bytes([raw[0], raw[1]]),
        dst_port: u16::from_be_bytes([raw[2], raw[3]]),
        length,
        checksum,
        payload: body[UDP_HEADER_LEN..].to_vec(),
        checksum_ok,
    })
}

pub fn build_udp_packet(src: Ipv4Addr, dst: Ipv4Addr, dgram: &UdpDatagram) -> Result<Vec<u8>, PacketError> {
    let payload = dgram.to_bytes(src, dst)?;
    serialize_ipv4(&Ipv4Packet::new(src, dst, IpProtocol::Udp, payload))
}
