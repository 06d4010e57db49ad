//! Monotonic timestamps for persisted records.
//!
//! Scripted runs use a logical clock so that every persisted artifact is
//! byte-reproducible; live runs use wall-clock milliseconds. Both never go
//! backwards, including across a restart (the engine persists the clock).

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Logical,
    Wall,
}

#[derive(Debug)]
pub struct Clock {
    mode: ClockMode,
    last: AtomicU64,
}

impl Clock {
    pub fn logical() -> Self {
        Self::new(ClockMode::Logical, 0)
    }

    pub fn wall() -> Self {
        Self::new(ClockMode::Wall, 0)
    }

    pub fn new(mode: ClockMode, last: u64) -> Self {
        Self {
            mode,
            last: AtomicU64::new(last),
        }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    /// Returns a timestamp strictly greater than every previous one.
    pub fn now(&self) -> u64 {
        match self.mode {
            ClockMode::Logical => self.last.fetch_add(1, Ordering::SeqCst) + 1,
            ClockMode::Wall => {
                let wall = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0);
                let mut prev = self.last.load(Ordering::SeqCst);
                loop {
                    let next = wall.max(prev + 1);
                    match self
                        .last
                        .compare_exchange(prev, next, Ordering::SeqCst, Ordering::SeqCst)
                    {
                        Ok(_) => return next,
                        Err(actual) => prev = actual,
                    }
                }
            }
        }
    }

    /// Last value handed out.
    pub fn current(&self) -> u64 {
        self.last.load(Ordering::SeqCst)
    }

    /// Ensures future timestamps are greater than `t`.
    pub fn observe(&self, t: u64) {
        self.last.fetch_max(t, Ordering::SeqCst);
    }
}
