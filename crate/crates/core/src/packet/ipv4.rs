use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::checksum::{internet_checksum, verify};
use super::PacketError;

pub const MIN_HEADER_LEN: usize = 20;
pub const MAX_HEADER_LEN: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IpProtocol {
    Tcp,
    Udp,
    Other(u8),
}

impl IpProtocol {
    pub fn code(self) -> u8 {
        match self {
            IpProtocol::Tcp => 6,
            IpProtocol::Udp => 17,
            IpProtocol::Other(c) => c,
        }
    }
}

impl From<u8> for IpProtocol {
    fn from(code: u8) -> Self {
        match code {
            6 => IpProtocol::Tcp,
            17 => IpProtocol::Udp,
            c => IpProtocol::Other(c),
        }
    }
}

/// A decoded IPv4 datagram. Fields not interpreted by the relay (TOS,
/// identification, fragment word, options) are kept verbatim so that
/// re-serialization is byte-identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Packet {
    pub version: u8,
    pub header_length: usize,
    pub tos: u8,
    pub total_length: usize,
    pub identification: u16,
    /// Flags (3 bits) and fragment offset (13 bits).
    pub flags_fragment: u16,
    pub ttl: u8,
    pub protocol: IpProtocol,
    pub header_checksum: u16,
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub options: Vec<u8>,
    pub payload: Vec<u8>,
    pub checksum_ok: bool,
}

impl Ipv4Packet {
    /// A fresh packet with a 20-byte header, DF set and TTL 64.
    pub fn new(src: Ipv4Addr, dst: Ipv4Addr, protocol: IpProtocol, payload: Vec<u8>) -> Self {
        Ipv4Packet {
            version: 4,
            header_length: MIN_HEADER_LEN,
            tos: 0,
            total_length: MIN_HEADER_LEN + payload.len(),
            identification: 0,
            flags_fragment: 0x4000,
            ttl: 64,
            protocol,
            header_checksum: 0,
            src_addr: src,
            dst_addr: dst,
            options: Vec::new(),
            payload,
            checksum_ok: true,
        }
    }
}

/// Decode an IPv4 datagram. Bytes past `total_length` (link padding) are
/// ignored. A header checksum mismatch is reported through `checksum_ok`.
pub fn parse_ipv4(raw: &[u8]) -> Result<Ipv4Packet, PacketError> {
    if raw.len() < MIN_HEADER_LEN {
        return Err(PacketError::TruncatedPacket { needed: MIN_HEADER_LEN, available: raw.len() });
    }
    let version = raw[0] >> 4;
    if version != 4 {
        return Err(PacketError::UnsupportedVersion(version));
    }
    let header_length = ((raw[0] & 0x0f) as usize) * 4;
    if header_length < MIN_HEADER_LEN {
        return Err(PacketError::BadHeaderLength(header_length));
    }
    if raw.len() < header_length {
        return Err(PacketError::TruncatedPacket { needed: header_length, available: raw.len() });
    }
    let total_length = u16::from_be_bytes([raw[2], raw[3]]) as usize;
    if total_length < header_length {
        return Err(PacketError::BadHeaderLength(total_length));
    }
    if raw.len() < total_length {
        return Err(PacketError::TruncatedPacket { needed: total_length, available: raw.len() });
    }
    let header = &raw[..header_length];
    Ok(Ipv4Packet {
        version,
        header_length,
        tos: raw[1],
        total_length,
        identification: u16::from_be_bytes([raw[4], raw[5]]),
        flags_fragment: u16::from_be_bytes([raw[6], raw[7]]),
        ttl: raw[8],
        protocol: IpProtocol::from(raw[9]),
        header_checksum: u16::from_be_bytes([raw[10], raw[11]]),
        src_addr: Ipv4Addr::new(raw[12], raw[13], raw[14], raw[15]),
        dst_addr: Ipv4Addr::new(raw[16], raw[17], raw[18], raw[19]),
        options: raw[MIN_HEADER_LEN..header_length].to_vec(),
        payload: raw[header_length..total_length].to_vec(),
        checksum_ok: verify(header),
    })
}

/// Like [`parse_ipv4`] but a header checksum mismatch is an error.
pub fn parse_ipv4_strict(raw: &[u8]) -> Result<Ipv4Packet, PacketError> {
    let pkt = parse_ipv4(raw)?;
    if !pkt.checksum_ok {
        return Err(PacketError::BadChecksum);
    }
    Ok(pkt)
}

/// Encode `pkt`. The header length, total length and header checksum are
/// derived from the options and payload; the corresponding fields of `pkt`
/// are not trusted.
pub fn serialize_ipv4(pkt: &Ipv4Packet) -> Result<Vec<u8>, PacketError> {
    if !pkt.options.len().is_multiple_of(4) || MIN_HEADER_LEN + pkt.options.len() > MAX_HEADER_LEN {
        return Err(PacketError::FieldOverflow("options"));
    }
    let header_length = MIN_HEADER_LEN + pkt.options.len();
    let total = header_length + pkt.payload.len();
    if total > u16::MAX as usize {
        return Err(PacketError::FieldOverflow("payload"));
    }
    let mut out = Vec::with_capacity(total);
    out.push(0x40 | (header_length / 4) as u8);
    out.push(pkt.tos);
    out.extend_from_slice(&(total as u16).to_be_bytes());
    out.extend_from_slice(&pkt.identification.to_be_bytes());
    out.extend_from_slice(&pkt.flags_fragment.to_be_bytes());
    out.push(pkt.ttl);
    out.push(pkt.protocol.code());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&pkt.src_addr.octets());
    out.extend_from_slice(&pkt.dst_addr.octets());
    out.extend_from_slice(&pkt.options);
    let csum = internet_checksum(&out[..header_length]);
    out[10..12].copy_from_slice(&csum.to_be_bytes());
    out.extend_from_slice(&pkt.payload);
    Ok(out)
}
