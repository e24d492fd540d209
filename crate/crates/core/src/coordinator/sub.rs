//! Per-node sub-coordinator state machine.
//!
//! Local ranks connect here instead of to the root. Registrations, publishes
//! and queries pass straight through; barrier entries and phase
//! acknowledgements are held until every local rank has sent one and then
//! forwarded as a single AGGREGATE frame.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;

use super::wire::{Body, ControlMessage, Role};
use super::{SessionId, SUB_SELF};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubOut {
    Up(ControlMessage),
    Down(SessionId, ControlMessage),
}

#[derive(Debug)]
pub struct SubCore {
    node: u32,
    expected_local: u32,
    registered_with_root: Option<bool>,
    rank_session: BTreeMap<u32, SessionId>,
    barrier_pending: BTreeMap<String, Vec<ControlMessage>>,
    barrier_waiting: BTreeMap<String, BTreeSet<u32>>,
    ack_pending: BTreeMap<(u32, u8), Vec<ControlMessage>>,
    frames_up: u64,
    aggregates_up: u64,
}

impl SubCore {
    pub fn new(node: u32, expected_local: u32) -> Self {
        Self {
            node,
            expected_local,
            registered_with_root: None,
            rank_session: BTreeMap::new(),
            barrier_pending: BTreeMap::new(),
            barrier_waiting: BTreeMap::new(),
            ack_pending: BTreeMap::new(),
            frames_up: 0,
            aggregates_up: 0,
        }
    }

    pub fn node(&self) -> u32 {
        self.node
    }

    pub fn register_message(&self) -> ControlMessage {
        ControlMessage::new(self.node, Body::Register {
            role: Role::Sub,
            node: self.node,
            ranks: self.expected_local,
        })
    }

    pub fn registered_with_root(&self) -> Option<bool> {
        self.registered_with_root
    }

    pub fn local_ranks(&self) -> impl Iterator<Item = u32> + '_ {
        self.rank_session.keys().copied()
    }

    pub fn frames_up(&self) -> u64 {
        self.frames_up
    }

    pub fn aggregates_up(&self) -> u64 {
        self.aggregates_up
    }

    fn up(&mut self, msg: ControlMessage, out: &mut Vec<SubOut>) {
        self.frames_up += 1;
        if matches!(msg.body, Body::Aggregate { .. }) {
            self.aggregates_up += 1;
        }
        out.push(SubOut::Up(msg));
    }

    pub fn from_rank(&mut self, session: SessionId, msg: ControlMessage) -> Vec<SubOut> {
        let mut out = Vec::new();
        let sender = msg.sender;
        match &msg.body {
            Body::Register { role: Role::Rank, .. } => {
                if self.rank_session.contains_key(&sender) {
                    out.push(SubOut::Down(session, ControlMessage::new(self.node, Body::RegisterAck {
                        dest: sender,
                        accepted: false,
                        expected: 0,
                        reason: format!("rank {sender} already registered"),
                    })));
                    return out;
                }
                self.rank_session.insert(sender, session);
                self.up(msg, &mut out);
            }
            Body::BarrierEnter { name, .. } => {
                let name = name.clone();
                self.barrier_waiting.entry(name.clone()).or_default().insert(sender);
                let pending = self.barrier_pending.entry(name.clone()).or_default();
                pending.push(msg);
                if pending.len() as u32 >= self.expected_local {
                    let frames = self.barrier_pending.remove(&name).unwrap();
                    self.up(ControlMessage::new(self.node, Body::Aggregate { frames }), &mut out);
                }
            }
            Body::PhaseAck { ckpt_id, phase } => {
                let key = (*ckpt_id, *phase);
                let pending = self.ack_pending.entry(key).or_default();
                pending.push(msg);
                if pending.len() as u32 >= self.expected_local {
                    let frames = self.ack_pending.remove(&key).unwrap();
                    self.up(ControlMessage::new(self.node, Body::Aggregate { frames }), &mut out);
                }
            }
            _ => self.up(msg, &mut out),
        }
        out
    }

    fn down_to(&self, rank: u32, msg: ControlMessage, out: &mut Vec<SubOut>) {
        match self.rank_session.get(&rank) {
            Some(s) => out.push(SubOut::Down(*s, msg)),
            None => debug!("node {}: no local session for rank {rank}", self.node),
        }
    }

    pub fn from_root(&mut self, msg: ControlMessage) -> Vec<SubOut> {
        let mut out = Vec::new();
        self.route_down(msg, &mut out);
        out
    }

    fn route_down(&mut self, msg: ControlMessage, out: &mut Vec<SubOut>) {
        match &msg.body {
            Body::RegisterAck { dest, accepted, .. } => {
                let (dest, accepted) = (*dest, *accepted);
                if dest == SUB_SELF {
                    self.registered_with_root = Some(accepted);
                    return;
                }
                let session = self.rank_session.get(&dest).copied();
                if !accepted {
                    self.rank_session.remove(&dest);
                }
                if let Some(s) = session {
                    out.push(SubOut::Down(s, msg));
                }
            }
            Body::QueryReply { dest, .. } | Body::CkptRequest { dest, .. } => {
                let dest = *dest;
                self.down_to(dest, msg, out);
            }
            Body::BarrierRelease { name, .. } => {
                let name = name.clone();
                self.barrier_pending.remove(&name);
                let waiting = self.barrier_waiting.remove(&name).unwrap_or_default();
                let sessions: BTreeSet<SessionId> =
                    waiting.iter().filter_map(|r| self.rank_session.get(r).copied()).collect();
                for s in sessions {
                    out.push(SubOut::Down(s, msg.clone()));
                }
            }
            Body::Aggregate { frames } => {
                for inner in frames.clone() {
                    self.route_down(inner, out);
                }
            }
            Body::Shutdown { .. } => {
                let sessions: BTreeSet<SessionId> = self.rank_session.values().copied().collect();
                for s in sessions {
                    out.push(SubOut::Down(s, msg.clone()));
                }
            }
            _ => debug!("node {}: unexpected downstream {:?}", self.node, msg.msg_type()),
        }
    }

    /// A local rank's connection went away; the root learns via SHUTDOWN.
    pub fn rank_closed(&mut self, session: SessionId) -> Vec<SubOut> {
        let mut out = Vec::new();
        let lost: Vec<u32> =
            self.rank_session.iter().filter(|(_, s)| **s == session).map(|(r, _)| *r).collect();
        for rank in lost {
            self.rank_session.remove(&rank);
            for p in self.barrier_pending.values_mut() {
                p.retain(|m| m.sender != rank);
            }
            for p in self.ack_pending.values_mut() {
                p.retain(|m| m.sender != rank);
            }
            for w in self.barrier_waiting.values_mut() {
                w.remove(&rank);
            }
            self.up(ControlMessage::new(rank, Body::Shutdown { reason: "rank-lost".into() }), &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::wire::ROOT_ID;

    fn sub_with(n: u32) -> SubCore {
        let mut sub = SubCore::new(7, n);
        for r in 0..n {
            let out = sub.from_rank(r as u64, ControlMessage::new(r, Body::Register { role: Role::Rank, node: 7, ranks: 1 }));
            assert!(matches!(out[0], SubOut::Up(_)));
        }
        sub
    }

    #[test]
    fn barrier_entries_aggregate() {
        let mut sub = sub_with(3);
        let enter = |r: u32| ControlMessage::new(r, Body::BarrierEnter { name: "b".into(), ok: true });
        assert!(sub.from_rank(0, enter(0)).is_empty());
        assert!(sub.from_rank(1, enter(1)).is_empty());
        let out = sub.from_rank(2, enter(2));
        match &out[..] {
            [SubOut::Up(ControlMessage { body: Body::Aggregate { frames }, .. })] => assert_eq!(frames.len(), 3),
            other => panic!("{other:?}"),
        }
        let rel = ControlMessage::new(ROOT_ID, Body::BarrierRelease { name: "b".into(), ok: true });
        let down = sub.from_root(rel);
        assert_eq!(down.len(), 3);
    }

    #[test]
    fn replies_route_by_destination() {
        let mut sub = sub_with(2);
        let out = sub.from_root(ControlMessage::new(ROOT_ID, Body::Aggregate {
            frames: vec![
                ControlMessage::new(ROOT_ID, Body::CkptRequest { dest: 1, ckpt_id: 1 }),
                ControlMessage::new(ROOT_ID, Body::CkptRequest { dest: 0, ckpt_id: 1 }),
            ],
        }));
        let targets: Vec<_> = out.iter().map(|o| match o { SubOut::Down(s, _) => *s, _ => panic!() }).collect();
        assert_eq!(targets, vec![1, 0]);
    }

    #[test]
    fn lost_rank_is_reported_up() {
        let mut sub = sub_with(2);
        let out = sub.rank_closed(1);
        assert!(matches!(&out[..], [SubOut::Up(ControlMessage { sender: 1, body: Body::Shutdown { .. } })]));
    }
}
