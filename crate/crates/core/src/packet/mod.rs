//! IPv4, TCP and UDP wire formats.
//!
//! Parsing never rejects a packet for a bad checksum; the result carries a
//! `checksum_ok` flag instead so that captures taken with checksum offload
//! stay usable. Callers that must not act on corrupted input check the flag.

mod checksum;
mod flow;
mod ipv4;
mod tcp;
mod udp;

pub use checksum::{finish, internet_checksum, partial_sum, pseudo_header_sum, transport_checksum, verify};
pub use flow::{flow_key_of, FlowKey, Transport};
pub use ipv4::{parse_ipv4, parse_ipv4_strict, serialize_ipv4, IpProtocol, Ipv4Packet};
pub use tcp::{build_tcp_packet, parse_tcp, TcpFlags, TcpSegment};
pub use udp::{build_udp_packet, parse_udp, UdpDatagram};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("truncated packet: need {needed} bytes, have {available}")]
    TruncatedPacket { needed: usize, available: usize },
    #[error("unsupported IP version {0}")]
    UnsupportedVersion(u8),
    #[error("invalid IPv4 header length {0}")]
    BadHeaderLength(usize),
    #[error("bad checksum")]
    BadChecksum,
    #[error("truncated segment: need {needed} bytes, have {available}")]
    TruncatedSegment { needed: usize, available: usize },
    #[error("field overflow: {0}")]
    FieldOverflow(&'static str),
    #[error("unsupported protocol {0}")]
    UnsupportedProtocol(u8),
}

/// `a < b` in modulo-2^32 sequence space.
#[inline]
pub fn seq_lt(a: u32, b: u32) -> bool {
    let d = b.wrapping_sub(a);
    d != 0 && d < 0x8000_0000
}

#[inline]
pub fn seq_le(a: u32, b: u32) -> bool {
    a == b || seq_lt(a, b)
}

#[inline]
pub fn seq_gt(a: u32, b: u32) -> bool {
    seq_lt(b, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_order_wraps() {
        assert!(seq_lt(1, 2));
        assert!(seq_lt(u32::MAX, 0));
        assert!(seq_lt(u32::MAX - 10, 5));
        assert!(!seq_lt(5, u32::MAX - 10));
        assert!(!seq_lt(7, 7));
        assert!(seq_le(7, 7));
        // exactly half the space apart is not "less than" in either direction
        assert!(!seq_lt(0, 0x8000_0000));
        assert!(seq_gt(0, u32::MAX));
    }
}
