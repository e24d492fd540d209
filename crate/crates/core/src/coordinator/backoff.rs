//! Staggered connection start times and a connection-limited endpoint
//! double used to reproduce launch storms.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::fabric::Tick;

/// Spreads connect attempts so that at most `max_concurrent_bursts` overlap.
///
/// Ranks fall into `ceil(n / max_concurrent_bursts)` stagger groups by
/// `rank mod groups`; group `g` starts at `g * base_delay` plus a uniform
/// jitter. With `base_delay >= jitter + handshake` the groups never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackoffPolicy {
    pub base_delay: Tick,
    pub jitter: Tick,
    pub max_concurrent_bursts: u32,
    /// Retries after a refused attempt before the rank gives up.
    pub max_retries: u32,
}

impl BackoffPolicy {
    /// Everyone connects at time zero.
    pub fn storm() -> Self {
        Self { base_delay: 0, jitter: 0, max_concurrent_bursts: u32::MAX, max_retries: 0 }
    }

    /// A policy whose groups are spaced far enough apart for `handshake`.
    pub fn staggered(max_concurrent_bursts: u32, handshake: Tick, jitter: Tick) -> Self {
        Self {
            base_delay: handshake + jitter,
            jitter,
            max_concurrent_bursts: max_concurrent_bursts.max(1),
            max_retries: 10,
        }
    }

    pub fn is_storm(&self) -> bool {
        self.base_delay == 0 && self.jitter == 0
    }

    pub fn groups(&self, n: u32) -> u32 {
        if self.is_storm() {
            1
        } else {
            n.div_ceil(self.max_concurrent_bursts.max(1)).max(1)
        }
    }

    pub fn start_time<R: Rng>(&self, rank: u32, n: u32, rng: &mut R) -> Tick {
        let group = (rank % self.groups(n)) as Tick;
        let jitter = if self.jitter == 0 { 0 } else { rng.gen_range(0..=self.jitter) };
        self.base_delay * group + jitter
    }

    pub fn schedule<R: Rng>(&self, n: u32, rng: &mut R) -> Vec<Tick> {
        (0..n).map(|r| self.start_time(r, n, rng)).collect()
    }

    /// Delay before retry number `attempt` (1-based) after a refusal.
    pub fn retry_delay(&self, attempt: u32) -> Tick {
        self.base_delay.max(1).saturating_mul(1 << attempt.min(16))
    }
}

/// What the endpoint does to an attempt beyond its limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overload {
    /// The connecting process is killed; the launch fails.
    Kill,
    /// The attempt is refused and may be retried.
    Refuse,
}

/// An endpoint that tolerates at most `limit` handshakes in progress.
#[derive(Debug)]
pub struct ConnectGate {
    pub limit: usize,
    pub handshake: Tick,
    pub overload: Overload,
    active: AtomicUsize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateOutcome {
    /// Most attempts in progress at once, counting each arriving attempt.
    pub peak: usize,
    /// `(participant, time the handshake completed)` in completion order.
    pub connected: Vec<(u32, Tick)>,
    pub killed: Vec<u32>,
    /// Participants that ran out of retries.
    pub exhausted: Vec<u32>,
    pub refusals: u64,
}

impl GateOutcome {
    pub fn succeeded(&self) -> bool {
        self.killed.is_empty() && self.exhausted.is_empty()
    }

    pub fn finish(&self) -> Tick {
        self.connected.iter().map(|c| c.1).max().unwrap_or(0)
    }
}

pub struct GateGuard<'a> {
    gate: &'a ConnectGate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        self.gate.active.fetch_sub(1, Ordering::SeqCst);
    }
}

impl ConnectGate {
    pub fn new(limit: usize, handshake: Tick, overload: Overload) -> Self {
        Self { limit, handshake: handshake.max(1), overload, active: AtomicUsize::new(0) }
    }

    /// Live admission for real transports: holds a slot until the guard drops.
    pub fn admit(&self) -> Result<GateGuard<'_>, Overload> {
        let prev = self.active.fetch_add(1, Ordering::SeqCst);
        if prev >= self.limit {
            self.active.fetch_sub(1, Ordering::SeqCst);
            return Err(self.overload);
        }
        Ok(GateGuard { gate: self })
    }

    /// Replays attempts starting at `starts[i]` for participant `i` in
    /// virtual time. Ties at one instant are processed in participant order.
    pub fn simulate(&self, starts: &[Tick], policy: &BackoffPolicy) -> GateOutcome {
        // (time, participant, attempt number)
        let mut pending: std::collections::BTreeSet<(Tick, u32, u32)> =
            starts.iter().enumerate().map(|(i, t)| (*t, i as u32, 0)).collect();
        let mut active: Vec<Tick> = Vec::new();
        let mut out = GateOutcome { peak: 0, connected: Vec::new(), killed: Vec::new(), exhausted: Vec::new(), refusals: 0 };
        while let Some((t, who, attempt)) = pending.pop_first() {
            active.retain(|end| *end > t);
            out.peak = out.peak.max(active.len() + 1);
            if active.len() < self.limit {
                let end = t + self.handshake;
                active.push(end);
                out.connected.push((who, end));
                continue;
            }
            match self.overload {
                Overload::Kill => out.killed.push(who),
                Overload::Refuse => {
                    out.refusals += 1;
                    if attempt >= policy.max_retries {
                        out.exhausted.push(who);
                    } else {
                        pending.insert((t + policy.retry_delay(attempt + 1), who, attempt + 1));
                    }
                }
            }
        }
        out.connected.sort_by_key(|c| (c.1, c.0));
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn storm_starts_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(BackoffPolicy::storm().schedule(64, &mut rng).iter().all(|t| *t == 0));
    }

    #[test]
    fn staggered_peak_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let policy = BackoffPolicy::staggered(8, 5, 3);
        let starts = policy.schedule(64, &mut rng);
        let gate = ConnectGate::new(usize::MAX, 5, Overload::Kill);
        let out = gate.simulate(&starts, &policy);
        assert!(out.peak <= 8, "peak {}", out.peak);
        assert_eq!(out.connected.len(), 64);
    }

    #[test]
    fn storm_is_killed_past_limit() {
        let gate = ConnectGate::new(16, 5, Overload::Kill);
        let out = gate.simulate(&[0; 64], &BackoffPolicy::storm());
        assert_eq!(out.killed.len(), 48);
        assert!(!out.succeeded());
        let out = gate.simulate(&[0; 16], &BackoffPolicy::storm());
        assert!(out.succeeded());
    }

    #[test]
    fn refusals_retry() {
        let gate = ConnectGate::new(4, 5, Overload::Refuse);
        let policy = BackoffPolicy { base_delay: 5, jitter: 0, max_concurrent_bursts: 4, max_retries: 10 };
        let out = gate.simulate(&[0; 16], &policy);
        assert!(out.succeeded());
        assert!(out.refusals > 0);
    }

    #[test]
    fn live_admission() {
        let gate = ConnectGate::new(1, 1, Overload::Refuse);
        let g = gate.admit().unwrap();
        assert_eq!(gate.admit().err(), Some(Overload::Refuse));
        drop(g);
        assert!(gate.admit().is_ok());
    }
}
