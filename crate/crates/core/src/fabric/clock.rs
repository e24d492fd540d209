//! Time sources shared by the fabric, the coordinator and the rank agents.
//!
//! Both modes count in `Tick`s: virtual ticks in [`ClockMode::Virtual`],
//! milliseconds since the clock was created in [`ClockMode::Wall`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub type Tick = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Virtual,
    Wall,
}

impl std::str::FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "virtual" => Ok(ClockMode::Virtual),
            "wall" => Ok(ClockMode::Wall),
            other => Err(format!("unknown clock mode `{other}`")),
        }
    }
}

#[derive(Debug)]
pub enum Clock {
    Virtual(AtomicU64),
    Wall(Instant),
}

impl Clock {
    pub fn new(mode: ClockMode) -> Self {
        match mode {
            ClockMode::Virtual => Clock::Virtual(AtomicU64::new(0)),
            ClockMode::Wall => Clock::Wall(Instant::now()),
        }
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            Clock::Virtual(_) => ClockMode::Virtual,
            Clock::Wall(_) => ClockMode::Wall,
        }
    }

    pub fn now(&self) -> Tick {
        match self {
            Clock::Virtual(t) => t.load(Ordering::Acquire),
            Clock::Wall(start) => start.elapsed().as_millis() as Tick,
        }
    }

    /// Moves virtual time forward to `t`. Never moves it backwards; a no-op
    /// on a wall clock.
    pub fn advance_to(&self, t: Tick) {
        if let Clock::Virtual(now) = self {
            now.fetch_max(t, Ordering::AcqRel);
        }
    }

    pub fn advance_by(&self, dt: Tick) {
        if let Clock::Virtual(now) = self {
            now.fetch_add(dt, Ordering::AcqRel);
        }
    }

    /// Blocks the calling thread until `t` on a wall clock. Virtual clocks
    /// cannot be waited on by a single participant; the driver advances them.
    pub fn sleep_until(&self, t: Tick) {
        if let Clock::Wall(_) = self {
            let now = self.now();
            if t > now {
                std::thread::sleep(Duration::from_millis(t - now));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_is_monotonic() {
        let c = Clock::new(ClockMode::Virtual);
        assert_eq!(c.now(), 0);
        c.advance_to(10);
        c.advance_to(5);
        assert_eq!(c.now(), 10);
        c.advance_by(3);
        assert_eq!(c.now(), 13);
    }

    #[test]
    fn wall_clock_ignores_advance() {
        let c = Clock::new(ClockMode::Wall);
        c.advance_to(1_000_000);
        assert!(c.now() < 1_000);
    }
}
