//! Classic capture files (24-byte global header, 16-byte record headers,
//! microsecond timestamps) and SYN/SYN-ACK pairing over them.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::NetIoError;
use crate::packet::{flow_key_of, parse_ipv4, parse_tcp, FlowKey, IpProtocol};

pub const LINKTYPE_NULL: u32 = 0;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
pub const LINKTYPE_LINUX_SLL: u32 = 113;
pub const LINKTYPE_IPV4: u32 = 228;

const MAGIC: u32 = 0xa1b2_c3d4;
const MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;
const MAX_RECORD: u32 = 256 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureRecord {
    /// Nanoseconds since the first record, clamped to be nondecreasing.
    pub ts_ns: u64,
    /// Nanoseconds since the Unix epoch as stored in the file.
    pub abs_ts_ns: u64,
    pub orig_len: u32,
    pub data: Vec<u8>,
}

pub struct CaptureReader<R = BufReader<File>> {
    path: Option<PathBuf>,
    input: R,
    swapped: bool,
    link_type: u32,
    time_base: Option<u64>,
    last_ts: u64,
    records: usize,
    truncated: bool,
}

impl CaptureReader {
    pub fn open(path: &Path) -> Result<Self, NetIoError> {
        let mut r = CaptureReader::new(BufReader::new(File::open(path)?))?;
        r.path = Some(path.to_path_buf());
        Ok(r)
    }
}

impl<R: Read> CaptureReader<R> {
    pub fn new(mut input: R) -> Result<Self, NetIoError> {
        let mut hdr = [0u8; 24];
        input.read_exact(&mut hdr).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => NetIoError::BadMagic(0),
            _ => NetIoError::Io(e),
        })?;
        let magic = u32::from_le_bytes(hdr[0..4].try_into().unwrap());
        let swapped = match magic {
            MAGIC => false,
            MAGIC_SWAPPED => true,
            other => return Err(NetIoError::BadMagic(other)),
        };
        let mut r = CaptureReader {
            path: None,
            input,
            swapped,
            link_type: 0,
            time_base: None,
            last_ts: 0,
            records: 0,
            truncated: false,
        };
        r.link_type = r.u32_at(&hdr, 20);
        Ok(r)
    }

    fn u32_at(&self, b: &[u8], at: usize) -> u32 {
        let raw: [u8; 4] = b[at..at + 4].try_into().unwrap();
        if self.swapped {
            u32::from_be_bytes(raw)
        } else {
            u32::from_le_bytes(raw)
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn link_type(&self) -> u32 {
        self.link_type
    }

    /// Absolute timestamp of the first record, once read.
    pub fn time_base(&self) -> Option<u64> {
        self.time_base
    }

    pub fn records_read(&self) -> usize {
        self.records
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    /// Next record in file order. A torn record is reported once as
    /// `TruncatedRecord`; reading stops there.
    pub fn next_record(&mut self) -> Result<Option<CaptureRecord>, NetIoError> {
        if self.truncated {
            return Ok(None);
        }
        let mut hdr = [0u8; 16];
        let got = read_full(&mut self.input, &mut hdr)?;
        if got == 0 {
            return Ok(None);
        }
        let index = self.records;
        if got < hdr.len() {
            self.truncated = true;
            return Err(NetIoError::TruncatedRecord { index });
        }
        let sec = self.u32_at(&hdr, 0) as u64;
        let usec = self.u32_at(&hdr, 4) as u64;
        let incl = self.u32_at(&hdr, 8);
        let orig_len = self.u32_at(&hdr, 12);
        if incl > MAX_RECORD {
            self.truncated = true;
            return Err(NetIoError::TruncatedRecord { index });
        }
        let mut data = vec![0u8; incl as usize];
        if read_full(&mut self.input, &mut data)? < data.len() {
            self.truncated = true;
            return Err(NetIoError::TruncatedRecord { index });
        }
        let abs_ts_ns = sec * 1_000_000_000 + usec * 1_000;
        let base = *self.time_base.get_or_insert(abs_ts_ns);
        let ts_ns = abs_ts_ns.saturating_sub(base).max(self.last_ts);
        self.last_ts = ts_ns;
        self.records += 1;
        Ok(Some(CaptureRecord { ts_ns, abs_ts_ns, orig_len, data }))
    }
}

impl<R: Read> Iterator for CaptureReader<R> {
    type Item = Result<CaptureRecord, NetIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

/// The IPv4 datagram inside a link-layer frame, if there is one.
pub fn ip_payload(link_type: u32, frame: &[u8]) -> Option<&[u8]> {
    match link_type {
        LINKTYPE_RAW | LINKTYPE_IPV4 => Some(frame),
        LINKTYPE_ETHERNET => {
            let mut off = 12;
            let mut ethertype = u16::from_be_bytes(frame.get(off..off + 2)?.try_into().ok()?);
            while ethertype == 0x8100 || ethertype == 0x88a8 {
                off += 4;
                ethertype = u16::from_be_bytes(frame.get(off..off + 2)?.try_into().ok()?);
            }
            (ethertype == 0x0800).then(|| frame.get(off + 2..)).flatten()
        }
        LINKTYPE_NULL => {
            let fam = frame.get(0..4)?;
            let is_inet = u32::from_le_bytes(fam.try_into().ok()?) == 2 || u32::from_be_bytes(fam.try_into().ok()?) == 2;
            is_inet.then(|| &frame[4..])
        }
        LINKTYPE_LINUX_SLL => {
            let proto = u16::from_be_bytes(frame.get(14..16)?.try_into().ok()?);
            (proto == 0x0800).then(|| frame.get(16..)).flatten()
        }
        _ => None,
    }
}

pub struct CaptureWriter<W: Write = BufWriter<File>> {
    out: W,
}

impl CaptureWriter {
    pub fn create(path: &Path, link_type: u32) -> Result<Self, NetIoError> {
        CaptureWriter::new(BufWriter::new(File::create(path)?), link_type)
    }
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(mut out: W, link_type: u32) -> Result<Self, NetIoError> {
        let mut hdr = Vec::with_capacity(24);
        hdr.extend_from_slice(&MAGIC.to_le_bytes());
        hdr.extend_from_slice(&2u16.to_le_bytes());
        hdr.extend_from_slice(&4u16.to_le_bytes());
        hdr.extend_from_slice(&0i32.to_le_bytes());
        hdr.extend_from_slice(&0u32.to_le_bytes());
        hdr.extend_from_slice(&65535u32.to_le_bytes());
        hdr.extend_from_slice(&link_type.to_le_bytes());
        out.write_all(&hdr)?;
        Ok(CaptureWriter { out })
    }

    /// Append a record. Timestamps keep microsecond resolution.
    pub fn write_record(&mut self, ts_ns: u64, data: &[u8]) -> Result<(), NetIoError> {
        let sec = (ts_ns / 1_000_000_000) as u32;
        let usec = ((ts_ns % 1_000_000_000) / 1_000) as u32;
        for v in [sec, usec, data.len() as u32, data.len() as u32] {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.out.write_all(data)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, NetIoError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Handshake {
    pub key: FlowKey,
    pub syn_ns: u64,
    pub synack_ns: u64,
    pub rtt_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct HandshakeReport {
    /// Every distinct flow, oriented as first seen.
    pub inventory: Vec<FlowKey>,
    pub handshakes: Vec<Handshake>,
    /// Flows whose first SYN never got a matching SYN-ACK.
    pub unanswered: Vec<FlowKey>,
    pub records: usize,
    /// Records that were not IPv4 TCP/UDP or failed to parse.
    pub skipped: usize,
    pub bad_checksums: usize,
    pub truncated: bool,
}

/// Pair each flow's first SYN with the SYN-ACK acknowledging it. With
/// `strict_checksums`, packets failing either checksum are ignored;
/// otherwise they are used and counted.
pub fn handshake_rtts<R: Read>(reader: &mut CaptureReader<R>, strict_checksums: bool) -> Result<HandshakeReport, NetIoError> {
    let mut report = HandshakeReport::default();
    let mut oriented: HashMap<FlowKey, FlowKey> = HashMap::new();
    let mut first_syn: BTreeMap<FlowKey, (u64, u32)> = BTreeMap::new();
    let mut syn_order: Vec<FlowKey> = Vec::new();
    let mut answered: HashMap<FlowKey, usize> = HashMap::new();
    loop {
        let rec = match reader.next_record() {
            Ok(Some(r)) => r,
            Ok(None) => break,
            Err(NetIoError::TruncatedRecord { .. }) => {
                report.truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        report.records += 1;
        let Some(ip) = ip_payload(reader.link_type(), &rec.data).and_then(|b| parse_ipv4(b).ok()) else {
            report.skipped += 1;
            continue;
        };
        let Ok(key) = flow_key_of(&ip) else {
            report.skipped += 1;
            continue;
        };
        let mut bad = !ip.checksum_ok;
        let tcp = if ip.protocol == IpProtocol::Tcp {
            match parse_tcp(&ip) {
                Ok(seg) => {
                    bad |= !seg.checksum_ok;
                    Some(seg)
                }
                Err(_) => {
                    report.skipped += 1;
                    continue;
                }
            }
        } else {
            None
        };
        if bad {
            report.bad_checksums += 1;
            if strict_checksums {
                continue;
            }
        }
        if !oriented.contains_key(&key) && !oriented.contains_key(&key.reversed()) {
            oriented.insert(key, key);
            oriented.insert(key.reversed(), key);
            report.inventory.push(key);
        }
        let Some(seg) = tcp else { continue };
        if seg.flags.syn() && !seg.flags.ack() {
            if let std::collections::btree_map::Entry::Vacant(e) = first_syn.entry(key) {
                e.insert((rec.ts_ns, seg.seq));
                syn_order.push(key);
            }
        } else if seg.flags.syn() && seg.flags.ack() {
            let client = key.reversed();
            if answered.contains_key(&client) {
                continue;
            }
            if let Some(&(syn_ns, iss)) = first_syn.get(&client) {
                if seg.ack == iss.wrapping_add(1) {
                    answered.insert(client, report.handshakes.len());
                    report.handshakes.push(Handshake {
                        key: client,
                        syn_ns,
                        synack_ns: rec.ts_ns,
                        rtt_ns: rec.ts_ns - syn_ns,
                    });
                }
            }
        }
    }
    report.unanswered = syn_order.into_iter().filter(|k| !answered.contains_key(k)).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{build_tcp_packet, TcpFlags, TcpSegment};
    use std::net::Ipv4Addr;

    fn capture(records: &[(u64, Vec<u8>)]) -> Vec<u8> {
        let mut w = CaptureWriter::new(Vec::new(), LINKTYPE_RAW).unwrap();
        for (t, d) in records {
            w.write_record(*t, d).unwrap();
        }
        w.finish().unwrap()
    }

    fn syn(port: u16, seq: u32) -> Vec<u8> {
        let seg = TcpSegment::new(port, 443, seq, 0, TcpFlags::SYN).with_mss(1460);
        build_tcp_packet(Ipv4Addr::new(10, 0, 0, 2), Ipv4Addr::new(93, 184, 216, 34), &seg).unwrap()
    }

    fn synack(port: u16, ack: u32) -> Vec<u8> {
        let seg = TcpSegment::new(443, port, 77, ack, TcpFlags::SYN | TcpFlags::ACK);
        build_tcp_packet(Ipv4Addr::new(93, 184, 216, 34), Ipv4Addr::new(10, 0, 0, 2), &seg).unwrap()
    }

    #[test]
    fn empty_capture() {
        let bytes = capture(&[]);
        assert_eq!(bytes.len(), 24);
        let mut r = CaptureReader::new(&bytes[..]).unwrap();
        assert_eq!(r.link_type(), LINKTYPE_RAW);
        assert!(r.next_record().unwrap().is_none());
        let rep = handshake_rtts(&mut CaptureReader::new(&bytes[..]).unwrap(), false).unwrap();
        assert_eq!(rep, HandshakeReport::default());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = capture(&[]);
        bytes[0] = 0;
        assert!(matches!(CaptureReader::new(&bytes[..]), Err(NetIoError::BadMagic(_))));
    }

    #[test]
    fn swapped_magic_is_read_big_endian() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u16.to_be_bytes());
        bytes.extend_from_slice(&4u16.to_be_bytes());
        bytes.extend_from_slice(&[0; 8]);
        bytes.extend_from_slice(&65535u32.to_be_bytes());
        bytes.extend_from_slice(&LINKTYPE_RAW.to_be_bytes());
        for v in [5u32, 250, 3, 3] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[1, 2, 3]);
        let mut r = CaptureReader::new(&bytes[..]).unwrap();
        assert_eq!(r.link_type(), LINKTYPE_RAW);
        let rec = r.next_record().unwrap().unwrap();
        assert_eq!(rec.abs_ts_ns, 5_000_250_000);
        assert_eq!(rec.ts_ns, 0);
        assert_eq!(rec.data, [1, 2, 3]);
    }

    #[test]
    fn truncated_record_stops_reading() {
        let mut bytes = capture(&[(0, vec![1; 10]), (1000, vec![2; 10])]);
        bytes.truncate(bytes.len() - 3);
        let mut r = CaptureReader::new(&bytes[..]).unwrap();
        assert!(r.next_record().unwrap().is_some());
        assert!(matches!(r.next_record(), Err(NetIoError::TruncatedRecord { index: 1 })));
        assert!(r.next_record().unwrap().is_none());
        assert_eq!(r.records_read(), 1);
    }

    #[test]
    fn pairs_handshakes_and_reports_unanswered() {
        let bytes = capture(&[
            (1_000_000_000, syn(40001, 100)),
            (1_000_500_000, syn(40002, 200)),
            (1_004_260_000, synack(40001, 101)),
            (1_005_000_000, syn(40003, 300)),
            (1_010_000_000, synack(40002, 999)),
            (1_041_500_000, synack(40002, 201)),
        ]);
        let rep = handshake_rtts(&mut CaptureReader::new(&bytes[..]).unwrap(), true).unwrap();
        assert_eq!(rep.inventory.len(), 3);
        let rtts: Vec<u64> = rep.handshakes.iter().map(|h| h.rtt_ns).collect();
        assert_eq!(rtts, [4_260_000, 41_000_000]);
        assert_eq!(rep.unanswered.len(), 1);
        assert_eq!(rep.unanswered[0].src_port, 40003);
    }

    #[test]
    fn link_layer_stripping() {
        let ip = syn(1, 1);
        let mut eth = vec![0u8; 12];
        eth.extend_from_slice(&[0x08, 0x00]);
        eth.extend_from_slice(&ip);
        assert_eq!(ip_payload(LINKTYPE_ETHERNET, &eth), Some(&ip[..]));
        let mut null = 2u32.to_le_bytes().to_vec();
        null.extend_from_slice(&ip);
        assert_eq!(ip_payload(LINKTYPE_NULL, &null), Some(&ip[..]));
        eth[12] = 0x86;
        eth[13] = 0xdd;
        assert_eq!(ip_payload(LINKTYPE_ETHERNET, &eth), None);
    }
}
