//! Virtual time as a monotone, non-negative offset over the host realtime clock.
//!
//! Every process in an emulation shares one global offset. A reading of virtual
//! time is `wall + offset`, so observers never need to coordinate to read it:
//! they add their cached offset to the local wall clock.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Nanoseconds since the UNIX epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VirtualTimestamp(i64);

impl VirtualTimestamp {
    pub const ZERO: VirtualTimestamp = VirtualTimestamp(0);
    /// Largest representable instant. On the wire it marks a jump request
    /// with no deadline (see [`crate::barrier`]).
    pub const MAX: VirtualTimestamp = VirtualTimestamp(i64::MAX);

    pub const fn from_nanos(nanos: i64) -> Self {
        VirtualTimestamp(nanos)
    }

    pub const fn as_nanos(self) -> i64 {
        self.0
    }

    pub fn saturating_add(self, d: Duration) -> Self {
        let ns = i64::try_from(d.as_nanos()).unwrap_or(i64::MAX);
        VirtualTimestamp(self.0.saturating_add(ns))
    }

    pub fn add_nanos(self, ns: i64) -> Self {
        VirtualTimestamp(self.0.saturating_add(ns))
    }

    /// Signed distance `self - earlier` in nanoseconds.
    pub fn nanos_since(self, earlier: VirtualTimestamp) -> i64 {
        self.0.saturating_sub(earlier.0)
    }

    /// Positive part of `self - earlier` as a `Duration`.
    pub fn saturating_duration_since(self, earlier: VirtualTimestamp) -> Duration {
        Duration::from_nanos(self.nanos_since(earlier).max(0) as u64)
    }
}

impl fmt::Display for VirtualTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Non-negative offset added to wall time to obtain virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ClockOffset(i64);

impl ClockOffset {
    pub const ZERO: ClockOffset = ClockOffset(0);

    /// Returns `None` for negative values.
    pub const fn from_nanos(nanos: i64) -> Option<Self> {
        if nanos < 0 {
            None
        } else {
            Some(ClockOffset(nanos))
        }
    }

    pub const fn as_nanos(self) -> i64 {
        self.0
    }
}

impl fmt::Display for ClockOffset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "+{}ns", self.0)
    }
}

// 64-bit nanosecond values travel as decimal strings so that readers limited
// to doubles do not lose precision. Integers are accepted on input as well.
fn deserialize_i64_lenient<'de, D: Deserializer<'de>>(d: D) -> Result<i64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Str(String),
        Int(i64),
    }
    match Repr::deserialize(d)? {
        Repr::Int(v) => Ok(v),
        Repr::Str(s) => s.trim().parse::<i64>().map_err(serde::de::Error::custom),
    }
}

impl Serialize for VirtualTimestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for VirtualTimestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        deserialize_i64_lenient(d).map(VirtualTimestamp)
    }
}

impl Serialize for ClockOffset {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ClockOffset {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = deserialize_i64_lenient(d)?;
        ClockOffset::from_nanos(v)
            .ok_or_else(|| serde::de::Error::custom(format!("negative clock offset {v}")))
    }
}

/// Reads the host realtime clock.
///
/// The realtime clock can be slewed by NTP, so two consecutive reads are only
/// guaranteed to be ordered up to about a millisecond.
pub fn wall_now() -> VirtualTimestamp {
    let since = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("host realtime clock is before the UNIX epoch");
    VirtualTimestamp(i64::try_from(since.as_nanos()).expect("realtime clock overflows i64 ns"))
}

/// Client-side cache of the global offset.
///
/// `virtual_now` is wait-free: the offset lives in an atomic and only ever
/// grows. Updates carry a sequence number; stale and duplicate sequence
/// numbers are dropped.
#[derive(Debug, Default)]
pub struct VirtualClock {
    offset: AtomicI64,
    seq: Mutex<u64>,
    updated: Condvar,
    closed: AtomicBool,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn offset(&self) -> ClockOffset {
        ClockOffset(self.offset.load(Ordering::Acquire))
    }

    pub fn update_sequence(&self) -> u64 {
        *self.seq.lock().unwrap()
    }

    pub fn virtual_now(&self) -> VirtualTimestamp {
        self.virtual_at(wall_now())
    }

    pub fn virtual_at(&self, wall: VirtualTimestamp) -> VirtualTimestamp {
        wall.add_nanos(self.offset.load(Ordering::Acquire))
    }

    /// Applies a broadcast offset. Returns whether the offset grew.
    ///
    /// An update whose `seq` is not newer than the last applied one is
    /// ignored. A newer update with a smaller offset advances the sequence
    /// (and wakes waiters) but leaves the offset untouched.
    pub fn apply_update(&self, new_offset: ClockOffset, seq: u64) -> bool {
        let mut current = self.seq.lock().unwrap();
        if seq <= *current {
            return false;
        }
        *current = seq;
        let prev = self.offset.fetch_max(new_offset.0, Ordering::AcqRel);
        self.updated.notify_all();
        new_offset.0 > prev
    }

    /// Blocks until an update newer than `seq` is applied, the clock is
    /// closed, or `timeout` of wall time passes. Returns true if an update
    /// arrived.
    pub fn wait_for_update_after(&self, seq: u64, timeout: Duration) -> bool {
        let guard = self.seq.lock().unwrap();
        let (guard, _) = self
            .updated
            .wait_timeout_while(guard, timeout, |cur| {
                *cur <= seq && !self.closed.load(Ordering::Acquire)
            })
            .unwrap();
        *guard > seq
    }

    /// Wakes every waiter permanently; used when the broadcast feed is lost.
    pub fn close(&self) {
        let _guard = self.seq.lock().unwrap();
        self.closed.store(true, Ordering::Release);
        self.updated.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }
}
