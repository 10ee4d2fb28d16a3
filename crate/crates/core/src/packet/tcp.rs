use std::fmt;
use std::net::Ipv4Addr;

use super::checksum::transport_checksum;
use super::ipv4::{serialize_ipv4, IpProtocol, Ipv4Packet};
use super::PacketError;

pub const TCP_HEADER_LEN: usize = 20;
const OPT_END: u8 = 0;
const OPT_NOP: u8 = 1;
const OPT_MSS: u8 = 2;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);
    pub const URG: TcpFlags = TcpFlags(0x20);

    pub const fn empty() -> Self {
        TcpFlags(0)
    }

    pub const fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub const fn union(self, other: TcpFlags) -> Self {
        TcpFlags(self.0 | other.0)
    }

    pub fn syn(self) -> bool {
        self.contains(Self::SYN)
    }
    pub fn ack(self) -> bool {
        self.contains(Self::ACK)
    }
    pub fn fin(self) -> bool {
        self.contains(Self::FIN)
    }
    pub fn rst(self) -> bool {
        self.contains(Self::RST)
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;
    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        self.union(rhs)
    }
}

impl fmt::Debug for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [(TcpFlags, &str); 6] = [
            (TcpFlags::SYN, "SYN"),
            (TcpFlags::ACK, "ACK"),
            (TcpFlags::FIN, "FIN"),
            (TcpFlags::RST, "RST"),
            (TcpFlags::PSH, "PSH"),
            (TcpFlags::URG, "URG"),
        ];
        let names: Vec<&str> = NAMES.iter().filter(|(fl, _)| self.contains(*fl)).map(|(_, n)| *n).collect();
        if names.is_empty() {
            write!(f, "-")
        } else {
            write!(f, "{}", names.join("|"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpSegment {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    /// Low nibble of byte 12 (reserved and NS bits), preserved verbatim.
    pub reserved: u8,
    pub flags: TcpFlags,
    pub window: u16,
    pub checksum: u16,
    pub urgent_ptr: u16,
    /// Raw option bytes, including any padding.
    pub options: Vec<u8>,
    pub payload: Vec<u8>,
    pub checksum_ok: bool,
}

impl TcpSegment {
    pub fn new(src_port: u16, dst_port: u16, seq: u32, ack: u32, flags: TcpFlags) -> Self {
        TcpSegment {
            src_port,
            dst_port,
            seq,
            ack,
            reserved: 0,
            flags,
            window: 0,
            checksum: 0,
            urgent_ptr: 0,
            options: Vec::new(),
            payload: Vec::new(),
            checksum_ok: true,
        }
    }

    pub fn with_window(mut self, window: u16) -> Self {
        self.window = window;
        self
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }

    /// Replace the options with a single MSS option.
    pub fn with_mss(mut self, mss: u16) -> Self {
        let [hi, lo] = mss.to_be_bytes();
        self.options = vec![OPT_MSS, 4, hi, lo];
        self
    }

    pub fn header_len(&self) -> usize {
        TCP_HEADER_LEN + self.options.len()
    }

    /// Sequence space consumed: payload plus one each for SYN and FIN.
    pub fn seq_len(&self) -> u32 {
        self.payload.len() as u32 + self.flags.syn() as u32 + self.flags.fin() as u32
    }

    /// Value of the MSS option, if present and well formed.
    pub fn mss(&self) -> Option<u16> {
        let mut opts = self.options.as_slice();
        while let Some((&kind, rest)) = opts.split_first() {
            match kind {
                OPT_END => return None,
                OPT_NOP => opts = rest,
                _ => {
                    let len = *rest.first()? as usize;
                    if len < 2 || len > opts.len() {
                        return None;
                    }
                    if kind == OPT_MSS && len == 4 {
                        return Some(u16::from_be_bytes([opts[2], opts[3]]));
                    }
                    opts = &opts[len..];
                }
            }
        }
        None
    }

    /// Encode with a freshly computed checksum for the given addresses.
    pub fn to_bytes(&self, src: Ipv4Addr, dst: Ipv4Addr) -> Result<Vec<u8>, PacketError> {
        if !self.options.len().is_multiple_of(4) || self.options.len() > 40 {
            return Err(PacketError::FieldOverflow("tcp options"));
        }
        let hlen = self.header_len();
        let mut out = Vec::with_capacity(hlen + self.payload.len());
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.ack.to_be_bytes());
        out.push(((hlen / 4) as u8) << 4 | (self.reserved & 0x0f));
        out.push(self.flags.0);
        out.extend_from_slice(&self.window.to_be_bytes());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.urgent_ptr.to_be_bytes());
        out.extend_from_slice(&self.options);
        out.extend_from_slice(&self.payload);
        let csum = transport_checksum(src, dst, IpProtocol::Tcp.code(), &out);
        out[16..18].copy_from_slice(&csum.to_be_bytes());
        Ok(out)
    }
}

/// Decode the TCP segment carried by `ip`, verifying its checksum against
/// the pseudo-header.
pub fn parse_tcp(ip: &Ipv4Packet) -> Result<TcpSegment, PacketError> {
    if ip.protocol != IpProtocol::Tcp {
        return Err(PacketError::UnsupportedProtocol(ip.protocol.code()));
    }
    let raw = &ip.payload;
    if raw.len() < TCP_HEADER_LEN {
        return Err(PacketError::TruncatedSegment { needed: TCP_HEADER_LEN, available: raw.len() });
    }
    let hlen = ((raw[12] >> 4) as usize) * 4;
    if hlen < TCP_HEADER_LEN || hlen > raw.len() {
        return Err(PacketError::TruncatedSegment { needed: hlen.max(TCP_HEADER_LEN), available: raw.len() });
    }
    Ok(TcpSegment {
        src_port: u16::from_be_bytes([raw[0], raw[1]]),
        dst_port: u16::from_be_bytes([raw[2], raw[3]]),
        seq: u32::from_be_bytes([raw[4], raw[5], raw[6], raw[7]]),
        ack: u32::from_be_bytes([raw[8], raw[9], raw[10], raw[11]]),
        reserved: raw[12] & 0x0f,
        flags: TcpFlags(raw[13]),
        window: u16::from_be_bytes([raw[14], raw[15]]),
        checksum: u16::from_be_bytes([raw[16], raw[17]]),
        urgent_ptr: u16::from_be_bytes([raw[18], raw[19]]),
        options: raw[TCP_HEADER_LEN..hlen].to_vec(),
        payload: raw[hlen..].to_vec(),
        checksum_ok: transport_checksum(ip.src_addr, ip.dst_addr, IpProtocol::Tcp.code(), raw) == 0,
    })
}

/// Wrap `seg` in a fresh IPv4 header and encode both with valid checksums.
pub fn build_tcp_packet(src: Ipv4Addr, dst: Ipv4Addr, seg: &TcpSegment) -> Result<Vec<u8>, PacketError> {
    let payload = seg.to_bytes(src, dst)?;
    serialize_ipv4(&Ipv4Packet::new(src, dst, IpProtocol::Tcp, payload))
}
