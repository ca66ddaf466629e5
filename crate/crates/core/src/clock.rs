//! Monotonic timestamps in integer nanoseconds.
//!
//! Every timestamp produced in one process shares a single anchor, so
//! timestamps taken by the client, gateway and engine running side by side
//! can be subtracted directly.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

static ANCHOR: OnceLock<Instant> = OnceLock::new();

fn anchor() -> Instant {
    *ANCHOR.get_or_init(Instant::now)
}

/// An instant on a clock domain, as nanoseconds since that domain's epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    /// Current instant on the process-wide monotonic clock.
    pub fn now() -> Self {
        Self::from_instant(Instant::now())
    }

    pub fn from_instant(at: Instant) -> Self {
        let since = at.saturating_duration_since(anchor());
        Timestamp(since.as_nanos() as u64)
    }

    /// The `Instant` this timestamp denotes on the process-wide clock.
    pub fn to_instant(self) -> Instant {
        anchor() + Duration::from_nanos(self.0)
    }

    pub fn from_millis(ms: u64) -> Self {
        Timestamp(ms * 1_000_000)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    /// `self - earlier`, or `None` if `earlier` is later than `self`.
    pub fn checked_since(self, earlier: Timestamp) -> Option<Duration> {
        self.0.checked_sub(earlier.0).map(Duration::from_nanos)
    }

    pub fn saturating_since(self, earlier: Timestamp) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }

    pub fn add_nanos(self, ns: u64) -> Timestamp {
        Timestamp(self.0 + ns)
    }
}

impl std::ops::Add<Duration> for Timestamp {
    type Output = Timestamp;

    fn add(self, d: Duration) -> Timestamp {
        Timestamp(self.0 + d.as_nanos() as u64)
    }
}
