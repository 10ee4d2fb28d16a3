//! Internet checksum (RFC 1071).
//!
//! Ones'-complement sum of 16-bit big-endian words. Odd-length input is
//! padded with a single zero byte for summation.

use std::net::Ipv4Addr;

/// Accumulate `data` into a running 32-bit partial sum.
///
/// Partial sums can be chained across regions as long as every region
/// except the last has even length.
pub fn partial_sum(data: &[u8], initial: u32) -> u32 {
    let mut sum = initial as u64;
    let mut chunks = data.chunks_exact(2);
    for word in &mut chunks {
        sum += u16::from_be_bytes([word[0], word[1]]) as u64;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u64) << 8;
    }
    fold_to_u32(sum)
}

fn fold_to_u32(mut sum: u64) -> u32 {
    while sum >> 32 != 0 {
        sum = (sum & 0xffff_ffff) + (sum >> 32);
    }
    sum as u32
}

/// Fold a partial sum to 16 bits and complement it.
pub fn finish(mut sum: u32) -> u16 {
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Ones'-complement of the ones'-complement 16-bit sum of `data`.
pub fn internet_checksum(data: &[u8]) -> u16 {
    finish(partial_sum(data, 0))
}

/// True when `data`, including its embedded checksum field, sums to zero.
pub fn verify(data: &[u8]) -> bool {
    internet_checksum(data) == 0
}

/// Partial sum of the IPv4 pseudo-header used by TCP and UDP.
pub fn pseudo_header_sum(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, length: u16) -> u32 {
    let mut hdr = [0u8; 12];
    hdr[0..4].copy_from_slice(&src.octets());
    hdr[4..8].copy_from_slice(&dst.octets());
    hdr[9] = protocol;
    hdr[10..12].copy_from_slice(&length.to_be_bytes());
    partial_sum(&hdr, 0)
}

/// Checksum of a transport segment (`segment` with its checksum field zeroed
/// or in place for verification) under the IPv4 pseudo-header.
pub fn transport_checksum(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, segment: &[u8]) -> u16 {
    let len = segment.len() as u16;
    finish(partial_sum(segment, pseudo_header_sum(src, dst, protocol, len)))
}
