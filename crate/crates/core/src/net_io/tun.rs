//! Layer-3 tunnel device (Linux `/dev/net/tun`).

use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use super::{NetIoError, PacketChannel};

pub struct TunDevice {
    #[cfg(target_os = "linux")]
    fd: std::os::fd::OwnedFd,
    name: String,
    mtu: usize,
    closed: AtomicBool,
}

impl std::fmt::Debug for TunDevice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TunDevice").field("name", &self.name).field("mtu", &self.mtu).finish()
    }
}

/// Create (or attach to) tunnel `name` without packet-info headers.
pub fn open_tunnel(name: &str, mtu: usize) -> Result<TunDevice, NetIoError> {
    imp::open(name, mtu)
}

impl TunDevice {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Assign an address and prefix and bring the interface up.
    pub fn configure(&self, addr: Ipv4Addr, prefix_len: u8) -> Result<(), NetIoError> {
        imp::configure(&self.name, addr, prefix_len)
    }
}

#[cfg(target_os = "linux")]
mod imp {
    use super::*;
    use std::io;
    use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};

    const TUNSETIFF: libc::c_ulong = 0x4004_54ca;
    const IFF_TUN: libc::c_short = 0x0001;
    const IFF_NO_PI: libc::c_short = 0x1000;

    #[repr(C)]
    struct IfReq {
        name: [libc::c_char; libc::IFNAMSIZ],
        data: [u8; 24],
    }

    impl IfReq {
        fn new(name: &str) -> Result<Self, NetIoError> {
            if name.is_empty() || name.len() >= libc::IFNAMSIZ || name.contains('\0') {
                return Err(NetIoError::Unsupported(format!("invalid interface name {name:?}")));
            }
            let mut req = IfReq { name: [0; libc::IFNAMSIZ], data: [0; 24] };
            for (d, s) in req.name.iter_mut().zip(name.bytes()) {
                *d = s as libc::c_char;
            }
            Ok(req)
        }

        fn set_short(&mut self, v: libc::c_short) {
            self.data[..2].copy_from_slice(&v.to_ne_bytes());
        }

        fn set_int(&mut self, v: libc::c_int) {
            self.data[..4].copy_from_slice(&v.to_ne_bytes());
        }

        fn set_addr(&mut self, addr: Ipv4Addr) {
            let sin = libc::sockaddr_in {
                sin_family: libc::AF_INET as libc::sa_family_t,
                sin_port: 0,
                sin_addr: libc::in_addr { s_addr: u32::from_ne_bytes(addr.octets()) },
                sin_zero: [0; 8],
            };
            // SAFETY: sockaddr_in is 16 plain bytes and fits the 24-byte union
            let bytes: [u8; 16] = unsafe { std::mem::transmute(sin) };
            self.data[..16].copy_from_slice(&bytes);
        }

        fn short(&self) -> libc::c_short {
            libc::c_short::from_ne_bytes([self.data[0], self.data[1]])
        }
    }

    fn map_err(name: &str, e: io::Error) -> NetIoError {
        match e.raw_os_error() {
            Some(libc::EPERM) | Some(libc::EACCES) => NetIoError::PermissionDenied(name.to_string()),
            Some(libc::EBUSY) => NetIoError::Busy(name.to_string()),
            Some(libc::ENOENT) | Some(libc::ENODEV) => {
                NetIoError::Unsupported(format!("/dev/net/tun is unavailable ({e})"))
            }
            _ => NetIoError::Io(e),
        }
    }

    fn ioctl(fd: libc::c_int, req: libc::c_ulong, ifr: &mut IfReq) -> io::Result<()> {
        // SAFETY: ifr is a valid, properly sized ifreq for these requests
        if unsafe { libc::ioctl(fd, req as _, ifr as *mut IfReq) } < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    fn control_socket() -> io::Result<OwnedFd> {
        // SAFETY: plain socket(2) call; the result is checked before wrapping
        let fd = unsafe { libc::socket(libc::AF_INET, libc::SOCK_DGRAM | libc::SOCK_CLOEXEC, 0) };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: fd is a fresh descriptor we own
        Ok(unsafe { OwnedFd::from_raw_fd(fd) })
    }

    pub(super) fn open(name: &str, mtu: usize) -> Result<TunDevice, NetIoError> {
        let mut req = IfReq::new(name)?;
        let path = c"/dev/net/tun";
        // SAFETY: path is NUL-terminated
        let raw = unsafe { libc::open(path.as_ptr(), libc::O_RDWR | libc::O_CLOEXEC) };
        if raw < 0 {
            return Err(map_err(name, io::Error::last_os_error()));
        }
        // SAFETY: raw is a fresh descriptor we own
        let fd = unsafe { OwnedFd::from_raw_fd(raw) };
        req.set_short(IFF_TUN | IFF_NO_PI);
        ioctl(fd.as_raw_fd(), TUNSETIFF, &mut req).map_err(|e| map_err(name, e))?;
        let ctl = control_socket().map_err(|e| map_err(name, e))?;
        let mut mtu_req = IfReq::new(name)?;
        mtu_req.set_int(mtu as libc::c_int);
        ioctl(ctl.as_raw_fd(), libc::SIOCSIFMTU, &mut mtu_req).map_err(|e| map_err(name, e))?;
        Ok(TunDevice { fd, name: name.to_string(), mtu, closed: AtomicBool::new(false) })
    }

    pub(super) fn configure(name: &str, addr: Ipv4Addr, prefix_len: u8) -> Result<(), NetIoError> {
        let ctl = control_socket().map_err(|e| map_err(name, e))?;
        let fd = ctl.as_raw_fd();
        let mut req = IfReq::new(name)?;
        req.set_addr(addr);
        ioctl(fd, libc::SIOCSIFADDR, &mut req).map_err(|e| map_err(name, e))?;
        let mask = u32::MAX.checked_shl(32 - prefix_len.min(32) as u32).unwrap_or(0);
        let mut req = IfReq::new(name)?;
        req.set_addr(Ipv4Addr::from(mask));
        ioctl(fd, libc::SIOCSIFNETMASK, &mut req).map_err(|e| map_err(name, e))?;
        let mut req = IfReq::new(name)?;
        ioctl(fd, libc::SIOCGIFFLAGS, &mut req).map_err(|e| map_err(name, e))?;
        let flags = req.short() | (libc::IFF_UP | libc::IFF_RUNNING) as libc::c_short;
        req.set_short(flags);
        ioctl(fd, libc::SIOCSIFFLAGS, &mut req).map_err(|e| map_err(name, e))?;
        Ok(())
    }

    pub(super) fn read(dev: &TunDevice, timeout: Option<Duration>) -> Result<Option<Vec<u8>>, NetIoError> {
        let deadline = timeout.map(|d| Instant::now() + d);
        loop {
            if dev.closed.load(Ordering::Acquire) {
                return Err(NetIoError::ChannelClosed);
            }
            // bounded slices so close() is noticed
            let slice = match deadline {
                Some(d) => d.saturating_duration_since(Instant::now()).min(Duration::from_millis(100)),
                None => Duration::from_millis(100),
            };
            let mut pfd = libc::pollfd { fd: dev.fd.as_raw_fd(), events: libc::POLLIN, revents: 0 };
            // SAFETY: one valid pollfd
            let n = unsafe { libc::poll(&mut pfd, 1, slice.as_millis() as libc::c_int) };
            if n < 0 {
                let e = io::Error::last_os_error();
                if e.kind() == io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(e.into());
            }
            if n > 0 {
                let mut buf = vec![0u8; dev.mtu.max(1500) + 64];
                // SAFETY: buf is writable for its full length
                let len = unsafe { libc::read(dev.fd.as_raw_fd(), buf.as_mut_ptr().cast(), buf.len()) };
                if len < 0 {
                    return Err(io::Error::last_os_error().into());
                }
                buf.truncate(len as usize);
                return Ok(Some(buf));
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Ok(None);
            }
        }
    }

    pub(super) fn write(dev: &TunDevice, pkt: &[u8]) -> Result<(), NetIoError> {
        // SAFETY: pkt is readable for its full length
        let n = unsafe { libc::write(dev.fd.as_raw_fd(), pkt.as_ptr().cast(), pkt.len()) };
        if n < 0 {
            return Err(io::Error::last_os_error().into());
        }
        Ok(())
    }
}

#[cfg(not(target_os = "linux"))]
mod imp {
    use super::*;

    pub(super) fn open(_name: &str, _mtu: usize) -> Result<TunDevice, NetIoError> {
        Err(NetIoError::Unsupported("tunnel devices are implemented for Linux only".into()))
    }

    pub(super) fn configure(_name: &str, _addr: Ipv4Addr, _prefix_len: u8) -> Result<(), NetIoError> {
        Err(NetIoError::Unsupported("tunnel devices are implemented for Linux only".into()))
    }

    pub(super) fn read(_dev: &TunDevice, _timeout: Option<Duration>) -> Result<Option<Vec<u8>>, NetIoError> {
        Err(NetIoError::ChannelClosed)
    }

    pub(super) fn write(_dev: &TunDevice, _pkt: &[u8]) -> Result<(), NetIoError> {
        Err(NetIoError::ChannelClosed)
    }
}

impl PacketChannel for TunDevice {
    fn read_packet(&self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>, NetIoError> {
        imp::read(self, timeout)
    }

    fn write_packet(&self, pkt: &[u8]) -> Result<(), NetIoError> {
        if pkt.len() > self.mtu {
            return Err(NetIoError::Oversize { len: pkt.len(), mtu: self.mtu });
        }
        if self.closed.load(Ordering::Acquire) {
            return Err(NetIoError::ChannelClosed);
        }
        imp::write(self, pkt)
    }

    fn mtu(&self) -> usize {
        self.mtu
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }
}
