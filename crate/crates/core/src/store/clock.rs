use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, Duration, TimeZone, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Advances one second per reading from a fixed start.
#[derive(Debug)]
pub struct LogicalClock {
    start: DateTime<Utc>,
    ticks: AtomicI64,
}

impl LogicalClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        LogicalClock { start, ticks: AtomicI64::new(0) }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        LogicalClock::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap())
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        self.start + Duration::seconds(self.ticks.fetch_add(1, Ordering::SeqCst))
    }
}
