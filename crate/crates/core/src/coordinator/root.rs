//! Root coordinator state machine.
//!
//! Transport-free: every input is `(session, message)` and every output is a
//! list of `(session, message)` to send. The transports apply inputs in a
//! single total order.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;

use super::kv::KvStore;
use super::wire::{Body, ControlMessage, ReplyStatus, Role, ROOT_ID};
use super::{CoordConfig, CoordError, SessionId, SUB_SELF};
use crate::fabric::Tick;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub to: SessionId,
    pub msg: ControlMessage,
}

#[derive(Debug, Default, Clone)]
struct SessionInfo {
    role: Option<Role>,
    node: u32,
    ranks: BTreeSet<u32>,
    frames_in: u64,
    frames_out: u64,
}

#[derive(Debug, Clone)]
struct BarrierState {
    entered: BTreeSet<u32>,
    ok: bool,
    opened_at: Tick,
}

#[derive(Debug, Clone)]
struct CkptRound {
    id: u32,
    acked: BTreeSet<u32>,
}

/// A barrier outcome as recorded by the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BarrierRecord {
    pub name: String,
    pub ok: bool,
    pub at: Tick,
}

#[derive(Debug)]
pub struct RootCore {
    expected: u32,
    config: CoordConfig,
    sessions: BTreeMap<SessionId, SessionInfo>,
    rank_session: BTreeMap<u32, SessionId>,
    barriers: BTreeMap<String, BarrierState>,
    kv: KvStore,
    ckpt: Option<CkptRound>,
    next_ckpt_id: u32,
    completed_ckpts: u32,
    aborted_ckpts: u32,
    barrier_log: Vec<BarrierRecord>,
    peak_sessions: usize,
}

impl RootCore {
    pub fn new(expected: u32, config: CoordConfig) -> Self {
        Self {
            expected,
            config,
            sessions: BTreeMap::new(),
            rank_session: BTreeMap::new(),
            barriers: BTreeMap::new(),
            kv: KvStore::new(),
            ckpt: None,
            next_ckpt_id: 1,
            completed_ckpts: 0,
            aborted_ckpts: 0,
            barrier_log: Vec::new(),
            peak_sessions: 0,
        }
    }

    pub fn expected(&self) -> u32 {
        self.expected
    }

    pub fn open_session(&mut self, id: SessionId) -> Result<(), CoordError> {
        if let Some(limit) = self.config.max_sessions {
            if self.sessions.len() >= limit {
                return Err(CoordError::SessionLimit(limit));
            }
        }
        self.sessions.insert(id, SessionInfo::default());
        self.peak_sessions = self.peak_sessions.max(self.sessions.len());
        Ok(())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn peak_sessions(&self) -> usize {
        self.peak_sessions
    }

    pub fn registered(&self) -> usize {
        self.rank_session.len()
    }

    pub fn kv(&self) -> &KvStore {
        &self.kv
    }

    pub fn kv_mut(&mut self) -> &mut KvStore {
        &mut self.kv
    }

    pub fn checkpoint_in_progress(&self) -> Option<u32> {
        self.ckpt.as_ref().map(|c| c.id)
    }

    pub fn completed_checkpoints(&self) -> u32 {
        self.completed_ckpts
    }

    pub fn aborted_checkpoints(&self) -> u32 {
        self.aborted_ckpts
    }

    pub fn barrier_log(&self) -> &[BarrierRecord] {
        &self.barrier_log
    }

    /// Frames received on a session (an AGGREGATE counts once).
    pub fn frames_in(&self, id: SessionId) -> u64 {
        self.sessions.get(&id).map_or(0, |s| s.frames_in)
    }

    pub fn total_frames_in(&self) -> u64 {
        self.sessions.values().map(|s| s.frames_in).sum()
    }

    pub fn next_deadline(&self) -> Option<Tick> {
        self.barriers
            .values()
            .map(|b| b.opened_at.saturating_add(self.config.barrier_timeout))
            .min()
    }

    pub fn handle(&mut self, now: Tick, from: SessionId, msg: ControlMessage) -> Vec<Outbound> {
        let mut out = Vec::new();
        if let Some(s) = self.sessions.get_mut(&from) {
            s.frames_in += 1;
        } else {
            debug!("frame from unknown session {from}");
            return out;
        }
        match msg.body {
            Body::Aggregate { frames } => {
                if self.sessions[&from].role != Some(Role::Sub) {
                    debug!("AGGREGATE from non-sub session {from} ignored");
                    return out;
                }
                for inner in frames {
                    self.apply(now, from, inner, &mut out);
                }
            }
            _ => self.apply(now, from, msg, &mut out),
        }
        self.count_out(&out);
        out
    }

    fn count_out(&mut self, out: &[Outbound]) {
        for o in out {
            if let Some(s) = self.sessions.get_mut(&o.to) {
                s.frames_out += 1;
            }
        }
    }

    fn apply(&mut self, now: Tick, from: SessionId, msg: ControlMessage, out: &mut Vec<Outbound>) {
        let sender = msg.sender;
        match msg.body {
            Body::Register { role: Role::Sub, node, .. } => {
                let s = self.sessions.get_mut(&from).unwrap();
                s.role = Some(Role::Sub);
                s.node = node;
                out.push(reply(from, Body::RegisterAck {
                    dest: SUB_SELF,
                    accepted: true,
                    expected: self.expected,
                    reason: String::new(),
                }));
            }
            Body::Register { role: Role::Rank, node, .. } => {
                let reject = if sender >= self.expected {
                    Some(format!("rank {sender} outside 0..{}", self.expected))
                } else if self.rank_session.contains_key(&sender) {
                    Some(format!("rank {sender} already registered"))
                } else {
                    None
                };
                let accepted = reject.is_none();
                if accepted {
                    self.rank_session.insert(sender, from);
                    let s = self.sessions.get_mut(&from).unwrap();
                    if s.role.is_none() {
                        s.role = Some(Role::Rank);
                        s.node = node;
                    }
                    s.ranks.insert(sender);
                }
                out.push(reply(from, Body::RegisterAck {
                    dest: sender,
                    accepted,
                    expected: self.expected,
                    reason: reject.unwrap_or_default(),
                }));
            }
            Body::BarrierEnter { name, ok } => {
                if !self.rank_session.contains_key(&sender) {
                    debug!("barrier `{name}` entered by unregistered rank {sender}");
                    return;
                }
                let b = self.barriers.entry(name.clone()).or_insert_with(|| BarrierState {
                    entered: BTreeSet::new(),
                    ok: true,
                    opened_at: now,
                });
                b.entered.insert(sender);
                b.ok &= ok;
                if b.entered.len() as u32 >= self.expected {
                    let b = self.barriers.remove(&name).unwrap();
                    self.release(now, &name, b, out);
                }
            }
            Body::Publish { req, claim, key, generation, value } => {
                if claim {
                    let (entry, won) = self.kv.claim(&key, value, generation);
                    out.push(reply(from, Body::QueryReply {
                        dest: sender,
                        req,
                        status: if won { ReplyStatus::ClaimOk } else { ReplyStatus::ClaimConflict },
                        generation: entry.generation,
                        seq: entry.seq,
                        value: entry.value,
                    }));
                } else {
                    self.kv.publish(&key, value, generation);
                }
            }
            Body::Query { req, key } => {
                let body = match self.kv.latest(&key) {
                    Some(e) => Body::QueryReply {
                        dest: sender,
                        req,
                        status: ReplyStatus::Found,
                        generation: e.generation,
                        seq: e.seq,
                        value: e.value.clone(),
                    },
                    None => Body::QueryReply {
                        dest: sender,
                        req,
                        status: ReplyStatus::NotFound,
                        generation: 0,
                        seq: 0,
                        value: Vec::new(),
                    },
                };
                out.push(reply(from, body));
            }
            Body::PhaseAck { ckpt_id, .. } => {
                let expected = self.expected as usize;
                if let Some(round) = self.ckpt.as_mut().filter(|r| r.id == ckpt_id) {
                    round.acked.insert(sender);
                    if round.acked.len() >= expected {
                        self.ckpt = None;
                        self.completed_ckpts += 1;
                    }
                }
            }
            Body::Shutdown { .. } => {
                // From a rank: it is leaving. From a sub: one of its ranks was lost.
                self.lose_rank(now, sender, out);
            }
            Body::Aggregate { .. } => debug!("nested AGGREGATE ignored"),
            Body::RegisterAck { .. }
            | Body::BarrierRelease { .. }
            | Body::QueryReply { .. }
            | Body::CkptRequest { .. } => debug!("downstream-only message from session {from} ignored"),
        }
    }

    fn release(&mut self, now: Tick, name: &str, b: BarrierState, out: &mut Vec<Outbound>) {
        let targets: BTreeSet<SessionId> = b
            .entered
            .iter()
            .filter_map(|r| self.rank_session.get(r).copied())
            .collect();
        for to in targets {
            out.push(reply(to, Body::BarrierRelease { name: name.to_string(), ok: b.ok }));
        }
        self.barrier_log.push(BarrierRecord { name: name.to_string(), ok: b.ok, at: now });
    }

    fn abort_all_barriers(&mut self, now: Tick, out: &mut Vec<Outbound>) {
        let open = std::mem::take(&mut self.barriers);
        for (name, mut b) in open {
            b.ok = false;
            self.release(now, &name, b, out);
        }
    }

    fn lose_rank(&mut self, now: Tick, rank: u32, out: &mut Vec<Outbound>) {
        let Some(session) = self.rank_session.remove(&rank) else { return };
        if let Some(s) = self.sessions.get_mut(&session) {
            s.ranks.remove(&rank);
        }
        for b in self.barriers.values_mut() {
            b.entered.remove(&rank);
        }
        self.abort_all_barriers(now, out);
        if self.ckpt.take().is_some() {
            self.aborted_ckpts += 1;
        }
    }

    pub fn close_session(&mut self, now: Tick, id: SessionId) -> Vec<Outbound> {
        let mut out = Vec::new();
        let Some(info) = self.sessions.get(&id).cloned() else { return out };
        for rank in info.ranks {
            self.lose_rank(now, rank, &mut out);
        }
        self.sessions.remove(&id);
        out.retain(|o| o.to != id);
        self.count_out(&out);
        out
    }

    /// Starts a checkpoint round: one CKPT_REQUEST per rank. Ranks behind a
    /// sub-coordinator receive theirs inside one AGGREGATE per sub.
    pub fn request_checkpoint(&mut self) -> Result<(u32, Vec<Outbound>), CoordError> {
        if let Some(round) = &self.ckpt {
            return Err(CoordError::CheckpointInProgress(round.id));
        }
        if self.registered() < self.expected as usize {
            return Err(CoordError::NotAllRegistered {
                registered: self.registered(),
                expected: self.expected as usize,
            });
        }
        let id = self.next_ckpt_id;
        self.next_ckpt_id += 1;
        let mut out = Vec::new();
        for (sid, info) in &self.sessions {
            if info.ranks.is_empty() {
                continue;
            }
            let requests: Vec<ControlMessage> = info
                .ranks
                .iter()
                .map(|r| ControlMessage::new(ROOT_ID, Body::CkptRequest { dest: *r, ckpt_id: id }))
                .collect();
            let msg = match info.role {
                Some(Role::Sub) => ControlMessage::new(ROOT_ID, Body::Aggregate { frames: requests }),
                _ => requests.into_iter().next().unwrap(),
            };
            out.push(Outbound { to: *sid, msg });
        }
        self.ckpt = Some(CkptRound { id, acked: BTreeSet::new() });
        self.count_out(&out);
        Ok((id, out))
    }

    /// Aborts barriers that have been open longer than the timeout.
    pub fn tick(&mut self, now: Tick) -> Vec<Outbound> {
        let mut out = Vec::new();
        let expired: Vec<String> = self
            .barriers
            .iter()
            .filter(|(_, b)| now >= b.opened_at.saturating_add(self.config.barrier_timeout))
            .map(|(n, _)| n.clone())
            .collect();
        for name in expired {
            let mut b = self.barriers.remove(&name).unwrap();
            b.ok = false;
            debug!("barrier `{name}` timed out with {}/{} entered", b.entered.len(), self.expected);
            self.release(now, &name, b, &mut out);
        }
        self.count_out(&out);
        out
    }
}

fn reply(to: SessionId, body: Body) -> Outbound {
    Outbound { to, msg: ControlMessage::new(ROOT_ID, body) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn register(core: &mut RootCore, session: SessionId, rank: u32) -> Vec<Outbound> {
        core.handle(0, session, ControlMessage::new(rank, Body::Register { role: Role::Rank, node: 0, ranks: 1 }))
    }

    fn accepted(out: &[Outbound]) -> bool {
        matches!(out[0].msg.body, Body::RegisterAck { accepted: true, .. })
    }

    fn flat(n: u32) -> RootCore {
        let mut core = RootCore::new(n, CoordConfig::default());
        for r in 0..n {
            core.open_session(r as u64).unwrap();
            assert!(accepted(&register(&mut core, r as u64, r)));
        }
        core
    }

    fn enter(core: &mut RootCore, now: Tick, rank: u32, name: &str) -> Vec<Outbound> {
        core.handle(now, rank as u64, ControlMessage::new(rank, Body::BarrierEnter { name: name.into(), ok: true }))
    }

    #[test]
    fn registration_is_sized() {
        let mut core = flat(4);
        core.open_session(10).unwrap();
        assert!(!accepted(&register(&mut core, 10, 4)));
        assert!(!accepted(&register(&mut core, 10, 2)));
        assert_eq!(core.registered(), 4);
    }

    #[test]
    fn barrier_releases_all_once_everyone_entered() {
        let mut core = flat(3);
        assert!(enter(&mut core, 1, 0, "b").is_empty());
        assert!(enter(&mut core, 2, 1, "b").is_empty());
        let out = enter(&mut core, 3, 2, "b");
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o.msg.body == Body::BarrierRelease { name: "b".into(), ok: true }));
        // Reusable.
        assert!(enter(&mut core, 4, 0, "b").is_empty());
    }

    #[test]
    fn barrier_timeout_aborts_waiters() {
        let mut core = RootCore::new(2, CoordConfig { barrier_timeout: 10, ..Default::default() });
        for r in 0..2 {
            core.open_session(r).unwrap();
            register(&mut core, r, r as u32);
        }
        enter(&mut core, 5, 0, "b");
        assert_eq!(core.next_deadline(), Some(15));
        assert!(core.tick(14).is_empty());
        let out = core.tick(15);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].to, 0);
        assert_eq!(out[0].msg.body, Body::BarrierRelease { name: "b".into(), ok: false });
    }

    #[test]
    fn participant_death_aborts_barrier() {
        let mut core = flat(3);
        enter(&mut core, 0, 0, "b");
        enter(&mut core, 0, 1, "b");
        let out = core.close_session(1, 2);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|o| matches!(o.msg.body, Body::BarrierRelease { ok: false, .. })));
        assert_eq!(core.registered(), 2);
    }

    #[test]
    fn kv_publish_query() {
        let mut core = flat(1);
        let q = |core: &mut RootCore| {
            core.handle(0, 0, ControlMessage::new(0, Body::Query { req: 1, key: "k".into() }))
        };
        assert!(matches!(q(&mut core)[0].msg.body, Body::QueryReply { status: ReplyStatus::NotFound, .. }));
        for v in [b"v1", b"v2"] {
            core.handle(0, 0, ControlMessage::new(0, Body::Publish {
                req: 0, claim: false, key: "k".into(), generation: 0, value: v.to_vec(),
            }));
        }
        match &q(&mut core)[0].msg.body {
            Body::QueryReply { status: ReplyStatus::Found, value, .. } => assert_eq!(value, b"v2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_outstanding_checkpoint() {
        let mut core = flat(4);
        let (id, out) = core.request_checkpoint().unwrap();
        assert_eq!(out.len(), 4);
        assert!(matches!(core.request_checkpoint(), Err(CoordError::CheckpointInProgress(i)) if i == id));
        for r in 0..4u32 {
            core.handle(0, r as u64, ControlMessage::new(r, Body::PhaseAck { ckpt_id: id, phase: 0 }));
        }
        assert_eq!(core.completed_checkpoints(), 1);
        assert!(core.request_checkpoint().is_ok());
    }

    #[test]
    fn checkpoint_needs_everyone_registered() {
        let mut core = RootCore::new(2, CoordConfig::default());
        core.open_session(0).unwrap();
        register(&mut core, 0, 0);
        assert!(matches!(core.request_checkpoint(), Err(CoordError::NotAllRegistered { .. })));
    }

    #[test]
    fn session_limit() {
        let mut core = RootCore::new(4, CoordConfig { max_sessions: Some(2), ..Default::default() });
        core.open_session(0).unwrap();
        core.open_session(1).unwrap();
        assert!(matches!(core.open_session(2), Err(CoordError::SessionLimit(2))));
    }
}
