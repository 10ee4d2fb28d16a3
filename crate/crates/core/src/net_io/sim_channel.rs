use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::{NetIoError, PacketChannel, DEFAULT_MTU};
use crate::clock::Clock;

#[derive(Default)]
struct Queue {
    packets: VecDeque<(u64, Vec<u8>)>,
}

struct Shared {
    clock: Arc<dyn Clock>,
    queues: [Mutex<Queue>; 2],
    ready: [Condvar; 2],
    delay_ns: [u64; 2],
    closed: Mutex<bool>,
    mtu: usize,
}

/// One end of an in-memory duplex link.
#[derive(Clone)]
pub struct SimChannelEnd {
    shared: Arc<Shared>,
    side: usize,
}

/// Linked pair. Packets written on the first end arrive at the second
/// `a_to_b` later, and the reverse direction takes `b_to_a`.
pub fn sim_channel(clock: Arc<dyn Clock>, a_to_b: Duration, b_to_a: Duration) -> (SimChannelEnd, SimChannelEnd) {
    let shared = Arc::new(Shared {
        clock,
        queues: Default::default(),
        ready: Default::default(),
        delay_ns: [a_to_b.as_nanos() as u64, b_to_a.as_nanos() as u64],
        closed: Mutex::new(false),
        mtu: DEFAULT_MTU,
    });
    (SimChannelEnd { shared: shared.clone(), side: 0 }, SimChannelEnd { shared, side: 1 })
}

impl SimChannelEnd {
    /// Queue this end reads from.
    fn inbox(&self) -> usize {
        1 - self.side
    }

    fn is_closed(&self) -> bool {
        *self.shared.closed.lock().unwrap()
    }

    /// Arrival time of the next packet for this end, if any is queued.
    pub fn next_ready_ns(&self) -> Option<u64> {
        self.shared.queues[self.inbox()].lock().unwrap().packets.front().map(|(t, _)| *t)
    }

    /// Pop a packet that has already arrived, without waiting.
    pub fn try_read(&self) -> Option<Vec<u8>> {
        let now = self.shared.clock.now_ns();
        let mut q = self.shared.queues[self.inbox()].lock().unwrap();
        match q.packets.front() {
            Some((t, _)) if *t <= now => q.packets.pop_front().map(|(_, p)| p),
            _ => None,
        }
    }

    fn read_virtual(&self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>, NetIoError> {
        let clock = &self.shared.clock;
        let now = clock.now_ns();
        let limit = timeout.map(|d| now.saturating_add(d.as_nanos() as u64));
        let mut q = self.shared.queues[self.inbox()].lock().unwrap();
        match q.packets.front() {
            Some((t, _)) if limit.is_none_or(|l| *t <= l) => {
                let (t, p) = q.packets.pop_front().unwrap();
                drop(q);
                clock.sleep(Duration::from_nanos(t.saturating_sub(now)));
                Ok(Some(p))
            }
            None if self.is_closed() => Err(NetIoError::ChannelClosed),
            // nothing can arrive unless someone writes; a timed wait just lets time pass
            _ => match limit {
                Some(l) => {
                    drop(q);
                    clock.sleep(Duration::from_nanos(l - now));
                    Ok(None)
                }
                None => Err(NetIoError::ChannelClosed),
            },
        }
    }

    fn read_real(&self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>, NetIoError> {
        let clock = &self.shared.clock;
        let limit = timeout.map(|d| clock.now_ns().saturating_add(d.as_nanos() as u64));
        let inbox = self.inbox();
        let mut q = self.shared.queues[inbox].lock().unwrap();
        loop {
            let now = clock.now_ns();
            if let Some((t, _)) = q.packets.front() {
                if *t <= now {
                    return Ok(q.packets.pop_front().map(|(_, p)| p));
                }
            } else if self.is_closed() {
                return Err(NetIoError::ChannelClosed);
            }
            if limit.is_some_and(|l| now >= l) {
                return Ok(None);
            }
            let head_wait = q.packets.front().map(|(t, _)| t - now);
            let limit_wait = limit.map(|l| l - now);
            let wait = match (head_wait, limit_wait) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) | (None, Some(a)) => a,
                // wake periodically so a close is noticed
                (None, None) => 50_000_000,
            };
            q = self.shared.ready[inbox].wait_timeout(q, Duration::from_nanos(wait)).unwrap().0;
        }
    }
}

impl PacketChannel for SimChannelEnd {
    fn read_packet(&self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>, NetIoError> {
        if self.shared.clock.is_virtual() {
            self.read_virtual(timeout)
        } else {
            self.read_real(timeout)
        }
    }

    fn write_packet(&self, pkt: &[u8]) -> Result<(), NetIoError> {
        if pkt.len() > self.shared.mtu {
            return Err(NetIoError::Oversize { len: pkt.len(), mtu: self.shared.mtu });
        }
        if self.is_closed() {
            return Err(NetIoError::ChannelClosed);
        }
        let at = self.shared.clock.now_ns() + self.shared.delay_ns[self.side];
        let mut q = self.shared.queues[self.side].lock().unwrap();
        // arrival order follows write order even if a delay would reorder
        let at = q.packets.back().map_or(at, |(t, _)| at.max(*t));
        q.packets.push_back((at, pkt.to_vec()));
        self.shared.ready[self.side].notify_all();
        Ok(())
    }

    fn mtu(&self) -> usize {
        self.shared.mtu
    }

    fn close(&self) {
        *self.shared.closed.lock().unwrap() = true;
        for cv in &self.shared.ready {
            cv.notify_all();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{MonotonicClock, VirtualClock};

    #[test]
    fn identity_and_delay_under_virtual_clock() {
        let clock = VirtualClock::new();
        let (a, b) = sim_channel(Arc::new(clock.clone()), Duration::from_millis(5), Duration::ZERO);
        a.write_packet(b"hello").unwrap();
        assert_eq!(b.try_read(), None);
        assert_eq!(b.next_ready_ns(), Some(5_000_000));
        assert_eq!(b.read_packet(Some(Duration::from_secs(1))).unwrap().unwrap(), b"hello");
        assert_eq!(clock.now_ns(), 5_000_000);
        b.write_packet(b"back").unwrap();
        assert_eq!(a.try_read().unwrap(), b"back");
    }

    #[test]
    fn virtual_timeout_advances_time() {
        let clock = VirtualClock::new();
        let (_a, b) = sim_channel(Arc::new(clock.clone()), Duration::ZERO, Duration::ZERO);
        assert_eq!(b.read_packet(Some(Duration::from_millis(7))).unwrap(), None);
        assert_eq!(clock.now_ns(), 7_000_000);
    }

    #[test]
    fn order_preserved_over_many_packets() {
        let clock = VirtualClock::new();
        let (a, b) = sim_channel(Arc::new(clock), Duration::from_micros(3), Duration::ZERO);
        for i in 0u32..10_000 {
            a.write_packet(&i.to_be_bytes()).unwrap();
        }
        for i in 0u32..10_000 {
            let p = b.read_packet(Some(Duration::from_secs(1))).unwrap().unwrap();
            assert_eq!(p, i.to_be_bytes());
        }
        assert_eq!(b.read_packet(Some(Duration::ZERO)).unwrap(), None);
    }

    #[test]
    fn oversize_and_closed() {
        let (a, b) = sim_channel(Arc::new(VirtualClock::new()), Duration::ZERO, Duration::ZERO);
        assert!(matches!(a.write_packet(&[0; 1501]), Err(NetIoError::Oversize { len: 1501, mtu: 1500 })));
        a.write_packet(&[1]).unwrap();
        b.close();
        assert!(matches!(a.write_packet(&[2]), Err(NetIoError::ChannelClosed)));
        assert_eq!(b.read_packet(None).unwrap().unwrap(), vec![1]);
        assert!(matches!(b.read_packet(None), Err(NetIoError::ChannelClosed)));
    }

    #[test]
    fn real_clock_cross_thread() {
        let (a, b) = sim_channel(Arc::new(MonotonicClock::new()), Duration::from_millis(2), Duration::ZERO);
        let t = std::thread::spawn(move || b.read_packet(Some(Duration::from_secs(5))).unwrap());
        std::thread::sleep(Duration::from_millis(10));
        a.write_packet(b"x").unwrap();
        assert_eq!(t.join().unwrap().unwrap(), b"x");
        let (c, d) = sim_channel(Arc::new(MonotonicClock::new()), Duration::ZERO, Duration::ZERO);
        assert_eq!(d.read_packet(Some(Duration::from_millis(5))).unwrap(), None);
        c.close();
    }
}
