//! Monotonic and virtual time sources.
//!
//! Everything that timestamps a measurement reads a [`Clock`]. Live runs
//! use [`MonotonicClock`]; the simulator uses [`VirtualClock`], which only
//! moves when something advances it.

use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};

pub trait Clock: Send + Sync {
    /// Nanoseconds since the clock's origin. Never decreases.
    fn now_ns(&self) -> u64;

    /// Let `d` elapse. A virtual clock advances instead of blocking.
    fn sleep(&self, d: Duration);

    /// Calendar time for reports. Not used for intervals.
    fn wall_time(&self) -> DateTime<Utc>;

    fn is_virtual(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }

    fn wall_time(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock. Clones share the same time.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
    wall_base_ns: Arc<AtomicI64>,
}

/// 2015-12-01T00:00:00Z, the wall-clock origin of simulated sessions.
const DEFAULT_WALL_BASE_NS: i64 = 1_448_928_000_000_000_000;

impl VirtualClock {
    pub fn new() -> Self {
        VirtualClock {
            now: Arc::new(AtomicU64::new(0)),
            wall_base_ns: Arc::new(AtomicI64::new(DEFAULT_WALL_BASE_NS)),
        }
    }

    pub fn advance(&self, d: Duration) {
        self.advance_ns(d.as_nanos() as u64);
    }

    pub fn advance_ns(&self, ns: u64) {
        self.now.fetch_add(ns, Ordering::AcqRel);
    }

    /// Move forward to `t_ns`; earlier targets are ignored.
    pub fn advance_to(&self, t_ns: u64) {
        self.now.fetch_max(t_ns, Ordering::AcqRel);
    }

    /// Shift the calendar time without touching monotonic time, as an
    /// administrator or NTP step would.
    pub fn adjust_wall(&self, delta_ns: i64) {
        self.wall_base_ns.fetch_add(delta_ns, Ordering::AcqRel);
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for VirtualClock {
    fn now_ns(&self) -> u64 {
        self.now.load(Ordering::Acquire)
    }

    fn sleep(&self, d: Duration) {
        self.advance(d)
    }

    fn wall_time(&self) -> DateTime<Utc> {
        let ns = self.wall_base_ns.load(Ordering::Acquire) + self.now_ns() as i64;
        Utc.timestamp_nanos(ns)
    }

    fn is_virtual(&self) -> bool {
        true
    }
}
