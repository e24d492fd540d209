//! Rank-side control-plane client.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use super::wire::{Body, ControlMessage, ReplyStatus, Role};
use super::{CoordError, Session};

/// Accounting bucket for control messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Launch = 0,
    Steady = 1,
    Checkpoint = 2,
    Restart = 3,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Launch, Phase::Steady, Phase::Checkpoint, Phase::Restart];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Launch => "launch",
            Phase::Steady => "steady",
            Phase::Checkpoint => "checkpoint",
            Phase::Restart => "restart",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseCounts {
    pub sent: [u64; 4],
    pub received: [u64; 4],
}

impl PhaseCounts {
    pub fn total(&self, p: Phase) -> u64 {
        self.sent[p as usize] + self.received[p as usize]
    }

    pub fn add(&mut self, other: &PhaseCounts) {
        for i in 0..4 {
            self.sent[i] += other.sent[i];
            self.received[i] += other.received[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    pub status: ReplyStatus,
    pub generation: u32,
    pub seq: u64,
    pub value: Vec<u8>,
}

pub struct CoordClient {
    rank: u32,
    node: u32,
    session: Box<dyn Session>,
    stash: VecDeque<ControlMessage>,
    next_req: u32,
    phase: Phase,
    counts: PhaseCounts,
    closed: bool,
}

impl CoordClient {
    pub fn new(rank: u32, node: u32, session: Box<dyn Session>) -> Self {
        Self {
            rank,
            node,
            session,
            stash: VecDeque::new(),
            next_req: 1,
            phase: Phase::Launch,
            counts: PhaseCounts::default(),
            closed: false,
        }
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn counts(&self) -> PhaseCounts {
        self.counts
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn send(&mut self, body: Body) -> Result<(), CoordError> {
        self.session.send(ControlMessage::new(self.rank, body))?;
        self.counts.sent[self.phase as usize] += 1;
        Ok(())
    }

    fn accept(&mut self, msg: ControlMessage) {
        // A checkpoint request is counted as checkpoint traffic even though it
        // arrives while the rank is still in steady state.
        let phase = match msg.body {
            Body::CkptRequest { .. } => Phase::Checkpoint,
            _ => self.phase,
        };
        self.counts.received[phase as usize] += 1;
        self.stash.push_back(msg);
    }

    /// Moves everything already delivered into the local stash.
    pub fn pump(&mut self) -> Result<(), CoordError> {
        loop {
            match self.session.try_recv() {
                Ok(Some(m)) => self.accept(m),
                Ok(None) => return Ok(()),
                Err(e) => {
                    self.closed = true;
                    return Err(e);
                }
            }
        }
    }

    fn take<T>(&mut self, mut pick: impl FnMut(&ControlMessage) -> Option<T>) -> Option<(usize, T)> {
        self.stash.iter().enumerate().find_map(|(i, m)| pick(m).map(|t| (i, t)))
    }

    /// Takes the first stashed message accepted by `pick`, pumping first.
    pub fn poll<T>(&mut self, mut pick: impl FnMut(&ControlMessage) -> Option<T>) -> Result<Option<T>, CoordError> {
        if let Some((i, t)) = self.take(&mut pick) {
            self.stash.remove(i);
            return Ok(Some(t));
        }
        self.pump()?;
        Ok(self.take(&mut pick).map(|(i, t)| {
            self.stash.remove(i);
            t
        }))
    }

    /// Blocks up to `timeout` for a message accepted by `pick`.
    pub fn wait<T>(
        &mut self,
        what: &str,
        timeout: Duration,
        mut pick: impl FnMut(&ControlMessage) -> Option<T>,
    ) -> Result<T, CoordError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(t) = self.poll(&mut pick)? {
                return Ok(t);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(CoordError::Timeout(what.to_string()));
            }
            match self.session.recv_timeout(left) {
                Ok(Some(m)) => self.accept(m),
                Ok(None) => {}
                Err(e) => {
                    self.closed = true;
                    return Err(e);
                }
            }
        }
    }

    pub fn send_register(&mut self) -> Result<(), CoordError> {
        let node = self.node;
        self.send(Body::Register { role: Role::Rank, node, ranks: 1 })
    }

    /// `Some(Ok(expected))` once the registration has been answered.
    pub fn poll_register(&mut self) -> Result<Option<Result<u32, CoordError>>, CoordError> {
        let rank = self.rank;
        self.poll(|m| match &m.body {
            Body::RegisterAck { dest, accepted, expected, reason } if *dest == rank => Some(if *accepted {
                Ok(*expected)
            } else {
                Err(CoordError::Rejected(reason.clone()))
            }),
            _ => None,
        })
    }

    pub fn register(&mut self, timeout: Duration) -> Result<u32, CoordError> {
        self.send_register()?;
        let rank = self.rank;
        self.wait("registration", timeout, |m| match &m.body {
            Body::RegisterAck { dest, accepted, expected, reason } if *dest == rank => Some(if *accepted {
                Ok(*expected)
            } else {
                Err(CoordError::Rejected(reason.clone()))
            }),
            _ => None,
        })?
    }

    pub fn publish(&mut self, key: &str, value: Vec<u8>, generation: u32) -> Result<(), CoordError> {
        self.send(Body::Publish { req: 0, claim: false, key: key.to_string(), generation, value })
    }

    /// Sends a first-writer-wins publish; the answer arrives as a reply to the returned id.
    pub fn send_claim(&mut self, key: &str, value: Vec<u8>, generation: u32) -> Result<u32, CoordError> {
        let req = self.alloc_req();
        self.send(Body::Publish { req, claim: true, key: key.to_string(), generation, value })?;
        Ok(req)
    }

    pub fn send_query(&mut self, key: &str) -> Result<u32, CoordError> {
        let req = self.alloc_req();
        self.send(Body::Query { req, key: key.to_string() })?;
        Ok(req)
    }

    fn alloc_req(&mut self) -> u32 {
        let req = self.next_req;
        self.next_req = self.next_req.wrapping_add(1).max(1);
        req
    }

    pub fn poll_reply(&mut self, req: u32) -> Result<Option<QueryResult>, CoordError> {
        self.poll(|m| reply_for(m, req))
    }

    pub fn wait_reply(&mut self, req: u32, timeout: Duration) -> Result<QueryResult, CoordError> {
        self.wait("query reply", timeout, |m| reply_for(m, req))
    }

    pub fn query(&mut self, key: &str, timeout: Duration) -> Result<QueryResult, CoordError> {
        let req = self.send_query(key)?;
        self.wait_reply(req, timeout)
    }

    pub fn barrier_enter(&mut self, name: &str, ok: bool) -> Result<(), CoordError> {
        self.send(Body::BarrierEnter { name: name.to_string(), ok })
    }

    /// `Some(ok)` once the barrier has been released.
    pub fn poll_barrier(&mut self, name: &str) -> Result<Option<bool>, CoordError> {
        self.poll(|m| release_of(m, name))
    }

    pub fn barrier(&mut self, name: &str, ok: bool, timeout: Duration) -> Result<bool, CoordError> {
        self.barrier_enter(name, ok)?;
        self.wait(&format!("barrier `{name}`"), timeout, |m| release_of(m, name))
    }

    pub fn poll_ckpt_request(&mut self) -> Result<Option<u32>, CoordError> {
        let rank = self.rank;
        self.poll(|m| match m.body {
            Body::CkptRequest { dest, ckpt_id } if dest == rank => Some(ckpt_id),
            _ => None,
        })
    }

    pub fn phase_ack(&mut self, ckpt_id: u32, phase: u8) -> Result<(), CoordError> {
        self.send(Body::PhaseAck { ckpt_id, phase })
    }

    pub fn shutdown(&mut self, reason: &str) -> Result<(), CoordError> {
        self.send(Body::Shutdown { reason: reason.to_string() })
    }
}

fn reply_for(m: &ControlMessage, req: u32) -> Option<QueryResult> {
    match &m.body {
        Body::QueryReply { req: r, status, generation, seq, value, .. } if *r == req => Some(QueryResult {
            status: *status,
            generation: *generation,
            seq: *seq,
            value: value.clone(),
        }),
        _ => None,
    }
}

fn release_of(m: &ControlMessage, name: &str) -> Option<bool> {
    match &m.body {
        Body::BarrierRelease { name: n, ok } if n == name => Some(*ok),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::coordinator::{Attach, Bus, CoordConfig};
    use crate::fabric::{Clock, ClockMode};

    const T: Duration = Duration::from_secs(1);

    #[test]
    fn counts_follow_phase() {
        let bus = Bus::new(1, CoordConfig::default(), Arc::new(Clock::new(ClockMode::Virtual)));
        let mut c = CoordClient::new(0, 0, Box::new(bus.connect(Attach::Root).unwrap()));
        assert_eq!(c.register(T).unwrap(), 1);
        c.set_phase(Phase::Steady);
        c.publish("k", vec![1], 0).unwrap();
        let r = c.query("k", T).unwrap();
        assert_eq!(r.value, vec![1]);
        assert!(c.barrier("b", true, T).unwrap());
        let counts = c.counts();
        assert_eq!(counts.total(Phase::Launch), 2);
        assert_eq!(counts.sent[Phase::Steady as usize], 3);
        assert_eq!(counts.received[Phase::Steady as usize], 2);
    }
}
