//! Packet sources and sinks: a tunnel device, capture files, and an
//! in-memory duplex channel for simulation.

use std::io;
use std::time::Duration;

use thiserror::Error;

mod capture;
mod sim_channel;
mod tun;

pub use capture::{
    handshake_rtts, ip_payload, CaptureReader, CaptureRecord, CaptureWriter, HandshakeReport, LINKTYPE_ETHERNET,
    LINKTYPE_IPV4, LINKTYPE_NULL, LINKTYPE_RAW,
};
pub use sim_channel::{sim_channel, SimChannelEnd};
pub use tun::{open_tunnel, TunDevice};

pub const DEFAULT_MTU: usize = 1500;

#[derive(Debug, Error)]
pub enum NetIoError {
    #[error(
        "permission denied opening tunnel {0}: tunnel creation needs CAP_NET_ADMIN \
         (e.g. `sudo setcap cap_net_admin+ep <binary>`), not root for the whole process"
    )]
    PermissionDenied(String),
    #[error("tunnel devices are not supported here: {0}")]
    Unsupported(String),
    #[error("tunnel {0} is already in use")]
    Busy(String),
    #[error("packet of {len} bytes exceeds mtu {mtu}")]
    Oversize { len: usize, mtu: usize },
    #[error("channel closed")]
    ChannelClosed,
    #[error("not a classic capture file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("capture record {index} is truncated")]
    TruncatedRecord { index: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Whole IPv4 datagrams in both directions.
pub trait PacketChannel: Send + Sync {
    /// Next datagram, waiting at most `timeout` (forever if `None`).
    /// `Ok(None)` means the wait expired.
    fn read_packet(&self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>, NetIoError>;

    fn write_packet(&self, pkt: &[u8]) -> Result<(), NetIoError>;

    fn mtu(&self) -> usize;

    fn close(&self);
}
