//! Windowed drain of in-flight messages.
//!
//! Messages already delivered when draining starts are collected first.
//! Then the receive queues are polled one window at a time: window `k`
//! collects arrivals in `(t0 + (k-1)W, t0 + kW]`. The drain ends after the
//! first window with no arrivals.

use crate::fabric::{ClockMode, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrainPolicy {
    pub window: Tick,
    pub max_windows: u32,
}

impl DrainPolicy {
    pub fn for_clock(mode: ClockMode) -> Self {
        let window = match mode {
            ClockMode::Virtual => 10,
            ClockMode::Wall => 100,
        };
        Self { window, max_windows: 64 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.window == 0 {
            return Err("drain window must be positive".into());
        }
        if self.max_windows < 2 {
            return Err("max_windows must be at least 2".into());
        }
        Ok(())
    }
}

impl Default for DrainPolicy {
    fn default() -> Self {
        Self::for_clock(ClockMode::Virtual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrainReport {
    pub drained: usize,
    pub windows: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrainStep {
    /// Call again once the clock reaches this time.
    Wait(Tick),
    Done(DrainReport),
    /// Every allowed window saw arrivals.
    TimedOut(DrainReport),
}

#[derive(Debug, Clone)]
pub struct Drainer {
    t0: Tick,
    policy: DrainPolicy,
    windows: u32,
    drained: usize,
    swept: bool,
}

impl Drainer {
    pub fn new(t0: Tick, policy: DrainPolicy) -> Self {
        Self { t0, policy, windows: 0, drained: 0, swept: false }
    }

    fn report(&self) -> DrainReport {
        DrainReport { drained: self.drained, windows: self.windows }
    }

    /// Advances as far as `now` allows. `poll(limit)` must move every
    /// message due at or before `limit` out of the receive queues and return
    /// how many it moved.
    pub fn step(&mut self, now: Tick, mut poll: impl FnMut(Tick) -> usize) -> DrainStep {
        if !self.swept {
            self.drained += poll(self.t0);
            self.swept = true;
        }
        loop {
            let end = self.t0 + Tick::from(self.windows + 1) * self.policy.window;
            if now < end {
                return DrainStep::Wait(end);
            }
            let n = poll(end);
            self.windows += 1;
            self.drained += n;
            if n == 0 {
                return DrainStep::Done(self.report());
            }
            if self.windows >= self.policy.max_windows {
                return DrainStep::TimedOut(self.report());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(arrivals: &[Tick], policy: DrainPolicy) -> DrainStep {
        let mut queue: Vec<Tick> = arrivals.to_vec();
        let mut d = Drainer::new(0, policy);
        let mut now = 0;
        loop {
            match d.step(now, |limit| {
                let before = queue.len();
                queue.retain(|t| *t > limit);
                before - queue.len()
            }) {
                DrainStep::Wait(t) => now = t,
                done => return done,
            }
        }
    }

    #[test]
    fn quiet_fabric_takes_one_window() {
        assert_eq!(run(&[], DrainPolicy::default()), DrainStep::Done(DrainReport { drained: 0, windows: 1 }));
    }

    #[test]
    fn already_arrived_messages_do_not_use_a_window() {
        assert_eq!(run(&[0, 0], DrainPolicy::default()), DrainStep::Done(DrainReport { drained: 2, windows: 1 }));
    }

    #[test]
    fn a_gap_ends_the_drain_early() {
        // Nothing in window 2, so the arrival at 25 is left behind.
        assert_eq!(run(&[3, 25], DrainPolicy::default()), DrainStep::Done(DrainReport { drained: 1, windows: 2 }));
    }

    #[test]
    fn bounded_by_max_windows() {
        let arrivals: Vec<Tick> = (1..100).collect();
        let policy = DrainPolicy { window: 10, max_windows: 3 };
        assert_eq!(run(&arrivals, policy), DrainStep::TimedOut(DrainReport { drained: 30, windows: 3 }));
    }
}
