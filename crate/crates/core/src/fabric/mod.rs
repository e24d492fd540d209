//! Deterministic simulated interconnect.
//!
//! The fabric owns one HCA per node, the queue pairs created on them, and
//! every datagram in flight. A subnet-manager role assigns LIDs; each HCA
//! hands out QP numbers from a monotonic counter. Real identifiers are only
//! meaningful inside one *generation*: [`Fabric::reassign_identifiers`]
//! starts a new one, hands every HCA a fresh LID, restarts QPN counters at a
//! seeded base and invalidates every queue pair and address from before.
//!
//! Every [`Address`] carries the generation it was issued in, so a send to a
//! stale address is recognised even when the new identifiers happen to be
//! numerically equal to the old ones.
//!
//! RNG use is fixed per send: one latency draw, then one uniform draw for the
//! UD drop decision, in that order, for every accepted `post_send`.

mod clock;

pub use clock::{Clock, ClockMode, Tick};

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// QPN base for generation 0.
pub const INITIAL_QPN_BASE: u32 = 64;
pub const MAX_QPN: u32 = (1 << 24) - 1;
/// Highest unicast LID.
pub const MAX_LID: u16 = 0xBFFF;
pub const DEFAULT_MTU: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RealLid(pub u16);

/// 24-bit queue pair number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QpNum(u32);

impl QpNum {
    pub fn new(value: u32) -> Option<Self> {
        (value <= MAX_QPN).then_some(QpNum(value))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for RealLid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for QpNum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QpMode {
    Rc,
    Ud,
}

/// A real endpoint address, tagged with the generation it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address {
    pub lid: RealLid,
    pub qpn: QpNum,
    pub generation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HcaState {
    pub node: u32,
    pub lid: RealLid,
    pub next_qpn: u32,
    pub generation: u32,
}

/// Caller-side handle to a queue pair. The queues themselves live in the
/// fabric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QueuePair {
    pub node: u32,
    pub lid: RealLid,
    pub qpn: QpNum,
    pub mode: QpMode,
    pub generation: u32,
}

impl QueuePair {
    pub fn address(&self) -> Address {
        Address { lid: self.lid, qpn: self.qpn, generation: self.generation }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub src: Address,
    pub dst: Address,
    pub payload: Vec<u8>,
    pub deliver_at: Tick,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SendToken(pub u64);

#[derive(Debug, Clone)]
pub struct FabricConfig {
    pub latency_min: Tick,
    pub latency_max: Tick,
    pub ud_drop_rate: f64,
    pub mtu: usize,
    pub clock_mode: ClockMode,
    pub rng_seed: u64,
    /// Receive queue depth per QP (datagrams queued, arrived or not).
    pub queue_capacity: usize,
    /// Record a delivery trace (one entry per datagram handed to a receiver).
    pub trace: bool,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            latency_min: 1,
            latency_max: 5,
            ud_drop_rate: 0.0,
            mtu: DEFAULT_MTU,
            clock_mode: ClockMode::Virtual,
            rng_seed: 0,
            queue_capacity: 1 << 16,
            trace: false,
        }
    }
}

impl FabricConfig {
    pub fn validate(&self) -> Result<(), FabricError> {
        if self.latency_min > self.latency_max {
            return Err(FabricError::InvalidConfig("latency_min > latency_max".into()));
        }
        if !(0.0..=1.0).contains(&self.ud_drop_rate) {
            return Err(FabricError::InvalidConfig("ud_drop_rate outside [0, 1]".into()));
        }
        if self.mtu == 0 || self.queue_capacity == 0 {
            return Err(FabricError::InvalidConfig("mtu and queue_capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("invalid fabric config: {0}")]
    InvalidConfig(String),
    #[error("node {0} is not registered with the fabric")]
    UnknownNode(u32),
    #[error("node {0} already has an HCA")]
    DuplicateHca(u32),
    #[error("HCA of node {node} is from generation {given}, fabric is at {current}")]
    StaleHca { node: u32, given: u32, current: u32 },
    #[error("queue pair {qpn} on node {node} is from generation {given}, fabric is at {current}")]
    StaleQp { node: u32, qpn: QpNum, given: u32, current: u32 },
    #[error("queue pair {qpn} on node {node} does not exist")]
    UnknownQp { node: u32, qpn: QpNum },
    #[error("QPN space exhausted on node {0}")]
    QpnExhausted(u32),
    #[error("queue pair modes do not allow this operation")]
    ModeMismatch,
    #[error("queue pair is already connected")]
    AlreadyConnected,
    #[error("queue pairs belong to different generations")]
    CrossGeneration,
    #[error("RC queue pair is not connected")]
    NotConnected,
    #[error("RC sends take no destination; UD sends require one")]
    DestinationMismatch,
    #[error("RC peer {0:?} is gone")]
    PeerGone(Address),
    #[error("payload of {len} bytes exceeds MTU {mtu}")]
    PayloadTooLarge { len: usize, mtu: usize },
    #[error("receive queue of the destination is full")]
    QueueFull,
    #[error("{0} datagrams still in flight")]
    InFlight(usize),
}

/// Counters. At every instant
/// `sent == delivered + dropped + blackholed + in_flight + discarded_on_kill`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricMetrics {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub blackholed: u64,
    pub in_flight: u64,
    pub discarded_on_kill: u64,
}

impl FabricMetrics {
    pub fn conserved(&self) -> bool {
        self.sent
            == self.delivered + self.dropped + self.blackholed + self.in_flight + self.discarded_on_kill
    }
}

/// One datagram handed to a receiver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub polled_at: Tick,
    pub deliver_at: Tick,
    pub src: Address,
    pub dst: Address,
    pub len: usize,
    pub digest: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReassignMode {
    /// Seeded random LID permutation plus offset; seeded random QPN bases.
    #[default]
    Random,
    /// Keep every LID and restart QPN counters at the generation-0 base.
    /// Numeric identifiers repeat; only the generation tells them apart.
    Identity,
    /// Each node takes the LID the next node held and QPN counters restart
    /// at the generation-0 base, so every old `(lid, qpn)` pair names a live
    /// queue pair on a different node.
    Rotate,
}

struct HcaSlot {
    lid: RealLid,
    qpn_base: u32,
    next_qpn: u32,
}

struct QpSlot {
    mode: QpMode,
    peer: Option<Address>,
    /// Latest delivery time scheduled on this QP's outgoing RC connection.
    rc_last_deliver: Tick,
    inbox: BTreeMap<(Tick, u64), Datagram>,
}

struct State {
    config: FabricConfig,
    rng: ChaCha8Rng,
    generation: u32,
    node_count: u32,
    hcas: BTreeMap<u32, HcaSlot>,
    lid_index: HashMap<RealLid, u32>,
    next_lid: u16,
    qps: HashMap<(u32, QpNum), QpSlot>,
    /// (deliver_at, seq) → owning QP, across all inboxes.
    pending: BTreeMap<(Tick, u64), (u32, QpNum)>,
    seq: u64,
    metrics: FabricMetrics,
    trace: Vec<TraceEvent>,
}

pub struct Fabric {
    clock: Arc<Clock>,
    state: Mutex<State>,
}

impl fmt::Debug for Fabric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.state.lock();
        f.debug_struct("Fabric")
            .field("now", &self.clock.now())
            .field("generation", &s.generation)
            .field("hcas", &s.hcas.len())
            .field("qps", &s.qps.len())
            .field("metrics", &s.metrics)
            .finish()
    }
}

impl Fabric {
    pub fn new(config: FabricConfig, node_count: u32) -> Result<Self, FabricError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Self {
            clock: Arc::new(Clock::new(config.clock_mode)),
            state: Mutex::new(State {
                config,
                rng,
                generation: 0,
                node_count,
                hcas: BTreeMap::new(),
                lid_index: HashMap::new(),
                next_lid: 1,
                qps: HashMap::new(),
                pending: BTreeMap::new(),
                seq: 0,
                metrics: FabricMetrics::default(),
                trace: Vec::new(),
            }),
        })
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn shared_clock(&self) -> Arc<Clock> {
        Arc::clone(&self.clock)
    }

    pub fn now(&self) -> Tick {
        self.clock.now()
    }

    pub fn generation(&self) -> u32 {
        self.state.lock().generation
    }

    pub fn config(&self) -> FabricConfig {
        self.state.lock().config.clone()
    }

    pub fn node_count(&self) -> u32 {
        self.state.lock().node_count
    }

    pub fn create_hca(&self, node: u32) -> Result<HcaState, FabricError> {
        let mut s = self.state.lock();
        if node >= s.node_count {
            return Err(FabricError::UnknownNode(node));
        }
        if s.hcas.contains_key(&node) {
            return Err(FabricError::DuplicateHca(node));
        }
        let mut lid = s.next_lid;
        while s.lid_index.contains_key(&RealLid(lid)) {
            lid += 1;
        }
        s.next_lid = lid + 1;
        let base = if s.generation == 0 {
            INITIAL_QPN_BASE
        } else {
            s.rng.gen_range(INITIAL_QPN_BASE..(1 << 23))
        };
        s.hcas.insert(node, HcaSlot { lid: RealLid(lid), qpn_base: base, next_qpn: base });
        s.lid_index.insert(RealLid(lid), node);
        Ok(HcaState { node, lid: RealLid(lid), next_qpn: base, generation: s.generation })
    }

    /// Current state of a node's HCA.
    pub fn hca(&self, node: u32) -> Option<HcaState> {
        let s = self.state.lock();
        s.hcas.get(&node).map(|h| HcaState {
            node,
            lid: h.lid,
            next_qpn: h.next_qpn,
            generation: s.generation,
        })
    }

    pub fn create_qp(&self, hca: &HcaState, mode: QpMode) -> Result<QueuePair, FabricError> {
        let mut s = self.state.lock();
        if hca.generation != s.generation {
            return Err(FabricError::StaleHca {
                node: hca.node,
                given: hca.generation,
                current: s.generation,
            });
        }
        let generation = s.generation;
        let slot = s.hcas.get_mut(&hca.node).ok_or(FabricError::UnknownNode(hca.node))?;
        let qpn = QpNum::new(slot.next_qpn).ok_or(FabricError::QpnExhausted(hca.node))?;
        slot.next_qpn += 1;
        let lid = slot.lid;
        s.qps.insert(
            (hca.node, qpn),
            QpSlot { mode, peer: None, rc_last_deliver: 0, inbox: BTreeMap::new() },
        );
        Ok(QueuePair { node: hca.node, lid, qpn, mode, generation })
    }

    /// Releases a queue pair; datagrams still queued on it are discarded.
    pub fn destroy_qp(&self, qp: &QueuePair) -> Result<(), FabricError> {
        let mut s = self.state.lock();
        check_live(&s, qp)?;
        if let Some(slot) = s.qps.remove(&(qp.node, qp.qpn)) {
            for key in slot.inbox.keys() {
                s.pending.remove(key);
            }
            let n = slot.inbox.len() as u64;
            s.metrics.in_flight -= n;
            s.metrics.discarded_on_kill += n;
        }
        Ok(())
    }

    /// Connects two RC queue pairs to each other.
    pub fn rc_connect(&self, a: &QueuePair, b: &QueuePair) -> Result<(), FabricError> {
        if a.mode != QpMode::Rc || b.mode != QpMode::Rc {
            return Err(FabricError::ModeMismatch);
        }
        if a.generation != b.generation {
            return Err(FabricError::CrossGeneration);
        }
        let mut s = self.state.lock();
        check_live(&s, a)?;
        check_live(&s, b)?;
        if s.qps[&(a.node, a.qpn)].peer.is_some() || s.qps[&(b.node, b.qpn)].peer.is_some() {
            return Err(FabricError::AlreadyConnected);
        }
        s.qps.get_mut(&(a.node, a.qpn)).unwrap().peer = Some(b.address());
        s.qps.get_mut(&(b.node, b.qpn)).unwrap().peer = Some(a.address());
        Ok(())
    }

    /// Moves one side of an RC connection to the connected state, given the
    /// remote address learned out of band.
    pub fn rc_connect_remote(&self, local: &QueuePair, remote: Address) -> Result<(), FabricError> {
        if local.mode != QpMode::Rc {
            return Err(FabricError::ModeMismatch);
        }
        let mut s = self.state.lock();
        check_live(&s, local)?;
        if remote.generation != s.generation {
            return Err(FabricError::CrossGeneration);
        }
        let node = *s.lid_index.get(&remote.lid).ok_or(FabricError::PeerGone(remote))?;
        match s.qps.get(&(node, remote.qpn)) {
            Some(slot) if slot.mode == QpMode::Rc => {}
            Some(_) => return Err(FabricError::ModeMismatch),
            None => return Err(FabricError::PeerGone(remote)),
        }
        let slot = s.qps.get_mut(&(local.node, local.qpn)).unwrap();
        if slot.peer.is_some() {
            return Err(FabricError::AlreadyConnected);
        }
        slot.peer = Some(remote);
        Ok(())
    }

    pub fn peer_of(&self, qp: &QueuePair) -> Option<Address> {
        let s = self.state.lock();
        s.qps.get(&(qp.node, qp.qpn)).and_then(|q| q.peer)
    }

    pub fn post_send(
        &self,
        qp: &QueuePair,
        dst: Option<Address>,
        payload: &[u8],
    ) -> Result<SendToken, FabricError> {
        let now = self.clock.now();
        let mut guard = self.state.lock();
        let s = &mut *guard;
        check_live(s, qp)?;
        if payload.len() > s.config.mtu {
            return Err(FabricError::PayloadTooLarge { len: payload.len(), mtu: s.config.mtu });
        }
        let src_slot = &s.qps[&(qp.node, qp.qpn)];
        let target = match (qp.mode, dst) {
            (QpMode::Rc, None) => {
                let peer = src_slot.peer.ok_or(FabricError::NotConnected)?;
                let resolved = resolve(s, peer);
                match resolved {
                    Some(key) if s.qps[&key].mode == QpMode::Rc => {
                        if s.qps[&key].inbox.len() >= s.config.queue_capacity {
                            return Err(FabricError::QueueFull);
                        }
                        Some(key)
                    }
                    _ => return Err(FabricError::PeerGone(peer)),
                }
            }
            (QpMode::Ud, Some(addr)) => resolve(s, addr).filter(|k| s.qps[k].mode == QpMode::Ud),
            _ => return Err(FabricError::DestinationMismatch),
        };
        let dst_addr = match qp.mode {
            QpMode::Rc => src_slot.peer.unwrap(),
            QpMode::Ud => dst.unwrap(),
        };

        let latency = s.rng.gen_range(s.config.latency_min..=s.config.latency_max);
        let roll: f64 = s.rng.gen();
        s.seq += 1;
        let seq = s.seq;
        s.metrics.sent += 1;

        if qp.mode == QpMode::Ud {
            if roll < s.config.ud_drop_rate {
                s.metrics.dropped += 1;
                return Ok(SendToken(seq));
            }
            let Some(key) = target else {
                s.metrics.blackholed += 1;
                return Ok(SendToken(seq));
            };
            if s.qps[&key].inbox.len() >= s.config.queue_capacity {
                s.metrics.dropped += 1;
                return Ok(SendToken(seq));
            }
        }
        let key = target.expect("resolved above");
        let mut deliver_at = now + latency;
        if qp.mode == QpMode::Rc {
            let src = s.qps.get_mut(&(qp.node, qp.qpn)).unwrap();
            deliver_at = deliver_at.max(src.rc_last_deliver);
            src.rc_last_deliver = deliver_at;
        }
        let datagram = Datagram {
            src: qp.address(),
            dst: dst_addr,
            payload: payload.to_vec(),
            deliver_at,
            seq,
        };
        s.qps.get_mut(&key).unwrap().inbox.insert((deliver_at, seq), datagram);
        s.pending.insert((deliver_at, seq), key);
        s.metrics.in_flight += 1;
        Ok(SendToken(seq))
    }

    /// Returns up to `max` datagrams whose delivery time has passed, oldest
    /// first. A stale or unknown queue pair yields nothing.
    pub fn poll_recv(&self, qp: &QueuePair, max: usize) -> Vec<Datagram> {
        self.poll_recv_until(qp, max, Tick::MAX)
    }

    /// Like [`Fabric::poll_recv`], restricted to datagrams due at or before
    /// `limit`.
    pub fn poll_recv_until(&self, qp: &QueuePair, max: usize, limit: Tick) -> Vec<Datagram> {
        let now = self.clock.now();
        let horizon = now.min(limit);
        let mut guard = self.state.lock();
        let s = &mut *guard;
        if check_live(s, qp).is_err() {
            return Vec::new();
        }
        let slot = s.qps.get_mut(&(qp.node, qp.qpn)).unwrap();
        let mut out = Vec::new();
        while out.len() < max {
            let Some(entry) = slot.inbox.first_entry() else { break };
            if entry.key().0 > horizon {
                break;
            }
            let d = entry.remove();
            out.push(d);
        }
        for d in &out {
            s.pending.remove(&(d.deliver_at, d.seq));
            if s.config.trace {
                s.trace.push(TraceEvent {
                    seq: d.seq,
                    polled_at: now,
                    deliver_at: d.deliver_at,
                    src: d.src,
                    dst: d.dst,
                    len: d.payload.len(),
                    digest: fnv1a(&d.payload),
                });
            }
        }
        s.metrics.delivered += out.len() as u64;
        s.metrics.in_flight -= out.len() as u64;
        out
    }

    /// Queued datagrams for `qp`, due or not.
    pub fn queued(&self, qp: &QueuePair) -> usize {
        let s = self.state.lock();
        s.qps.get(&(qp.node, qp.qpn)).map_or(0, |q| q.inbox.len())
    }

    /// Earliest delivery time among queued datagrams.
    pub fn next_delivery(&self) -> Option<Tick> {
        self.state.lock().pending.keys().next().map(|k| k.0)
    }

    /// Earliest delivery time strictly after `t`.
    pub fn next_delivery_after(&self, t: Tick) -> Option<Tick> {
        self.state.lock().pending.range((t + 1, 0)..).next().map(|(k, _)| k.0)
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().pending.len()
    }

    pub fn metrics(&self) -> FabricMetrics {
        self.state.lock().metrics
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.state.lock().trace.clone()
    }

    /// Which node owns a real LID in the current generation. Oracle use only.
    pub fn node_of_lid(&self, lid: RealLid) -> Option<u32> {
        self.state.lock().lid_index.get(&lid).copied()
    }

    /// Process death: every queue pair and every queued datagram is lost.
    /// HCAs survive.
    pub fn kill_all(&self) {
        let mut s = self.state.lock();
        let lost = s.pending.len() as u64;
        s.pending.clear();
        s.qps.clear();
        s.metrics.in_flight -= lost;
        s.metrics.discarded_on_kill += lost;
    }

    pub fn reassign_identifiers(&self) -> Result<u32, FabricError> {
        self.reassign_identifiers_with(ReassignMode::Random)
    }

    /// Starts a new generation. Requires a quiesced fabric. Every queue pair
    /// of the old generation is invalidated.
    pub fn reassign_identifiers_with(&self, mode: ReassignMode) -> Result<u32, FabricError> {
        let mut guard = self.state.lock();
        let s = &mut *guard;
        if !s.pending.is_empty() {
            return Err(FabricError::InFlight(s.pending.len()));
        }
        s.qps.clear();
        s.generation += 1;

        let nodes: Vec<u32> = s.hcas.keys().copied().collect();
        let mut lids: Vec<u16> = nodes.iter().map(|n| s.hcas[n].lid.0).collect();
        match mode {
            ReassignMode::Identity => {
                for n in &nodes {
                    s.hcas.get_mut(n).unwrap().next_qpn = INITIAL_QPN_BASE;
                    s.hcas.get_mut(n).unwrap().qpn_base = INITIAL_QPN_BASE;
                }
            }
            ReassignMode::Rotate => {
                lids.rotate_left(1);
                for (n, lid) in nodes.iter().zip(&lids) {
                    let h = s.hcas.get_mut(n).unwrap();
                    h.lid = RealLid(*lid);
                    h.qpn_base = INITIAL_QPN_BASE;
                    h.next_qpn = INITIAL_QPN_BASE;
                }
            }
            ReassignMode::Random => {
                lids.shuffle(&mut s.rng);
                let max = lids.iter().copied().max().unwrap_or(0);
                let offset = s.rng.gen_range(0..=(MAX_LID - max).min(0x0400));
                for (n, lid) in nodes.iter().zip(&lids) {
                    let base = s.rng.gen_range(INITIAL_QPN_BASE..(1 << 23));
                    let h = s.hcas.get_mut(n).unwrap();
                    h.lid = RealLid(lid + offset);
                    h.qpn_base = base;
                    h.next_qpn = base;
                }
            }
        }
        s.lid_index = s.hcas.iter().map(|(n, h)| (h.lid, *n)).collect();
        s.next_lid = s.hcas.values().map(|h| h.lid.0).max().unwrap_or(0) + 1;
        Ok(s.generation)
    }

    /// QPN bases of the current generation, by node. Oracle use only.
    pub fn qpn_bases(&self) -> BTreeMap<u32, u32> {
        self.state.lock().hcas.iter().map(|(n, h)| (*n, h.qpn_base)).collect()
    }
}

fn check_live(s: &State, qp: &QueuePair) -> Result<(), FabricError> {
    if qp.generation != s.generation {
        return Err(FabricError::StaleQp {
            node: qp.node,
            qpn: qp.qpn,
            given: qp.generation,
            current: s.generation,
        });
    }
    if !s.qps.contains_key(&(qp.node, qp.qpn)) {
        return Err(FabricError::UnknownQp { node: qp.node, qpn: qp.qpn });
    }
    Ok(())
}

fn resolve(s: &State, addr: Address) -> Option<(u32, QpNum)> {
    if addr.generation != s.generation {
        return None;
    }
    let node = *s.lid_index.get(&addr.lid)?;
    s.qps.contains_key(&(node, addr.qpn)).then_some((node, addr.qpn))
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bounded FIFO used where a caller needs to buffer datagrams by channel.
pub type DatagramQueue = VecDeque<Datagram>;

#[cfg(test)]
mod tests {
    use super::*;

    fn fabric(nodes: u32) -> Fabric {
        Fabric::new(FabricConfig::default(), nodes).unwrap()
    }

    #[test]
    fn first_hca_gets_lid_one() {
        let f = fabric(2);
        let h0 = f.create_hca(0).unwrap();
        assert_eq!(h0.lid, RealLid(1));
        assert_eq!(h0.generation, 0);
        let h1 = f.create_hca(1).unwrap();
        assert_ne!(h0.lid, h1.lid);
        assert_eq!(f.create_hca(0), Err(FabricError::DuplicateHca(0)));
        assert_eq!(f.create_hca(7), Err(FabricError::UnknownNode(7)));
    }

    #[test]
    fn hca_created_after_reassign_is_in_new_generation() {
        let f = fabric(2);
        f.create_hca(0).unwrap();
        assert_eq!(f.reassign_identifiers().unwrap(), 1);
        let h1 = f.create_hca(1).unwrap();
        assert_eq!(h1.generation, 1);
        assert_ne!(Some(h1.lid), f.hca(0).map(|h| h.lid));
    }

    #[test]
    fn qp_numbers_are_monotonic_and_ud_is_unpeered() {
        let f = fabric(1);
        let h = f.create_hca(0).unwrap();
        let a = f.create_qp(&h, QpMode::Ud).unwrap();
        let b = f.create_qp(&h, QpMode::Ud).unwrap();
        assert!(b.qpn > a.qpn);
        assert_eq!(f.peer_of(&a), None);
    }

    #[test]
    fn stale_hca_is_rejected() {
        let f = fabric(1);
        let h = f.create_hca(0).unwrap();
        f.reassign_identifiers().unwrap();
        assert!(matches!(f.create_qp(&h, QpMode::Rc), Err(FabricError::StaleHca { .. })));
        let fresh = f.hca(0).unwrap();
        assert!(f.create_qp(&fresh, QpMode::Rc).is_ok());
    }

    #[test]
    fn rc_connect_rules() {
        let f = fabric(2);
        let h0 = f.create_hca(0).unwrap();
        let h1 = f.create_hca(1).unwrap();
        let a = f.create_qp(&h0, QpMode::Rc).unwrap();
        let b = f.create_qp(&h1, QpMode::Rc).unwrap();
        let u = f.create_qp(&h1, QpMode::Ud).unwrap();
        assert_eq!(f.rc_connect(&a, &u), Err(FabricError::ModeMismatch));
        f.rc_connect(&a, &b).unwrap();
        assert_eq!(f.peer_of(&a), Some(b.address()));
        assert_eq!(f.peer_of(&b), Some(a.address()));
        assert_eq!(f.rc_connect(&a, &b), Err(FabricError::AlreadyConnected));
    }

    #[test]
    fn rc_full_mesh_counts_pairs() {
        let n = 8;
        let f = fabric(n);
        let hcas: Vec<_> = (0..n).map(|i| f.create_hca(i).unwrap()).collect();
        let mut connections = 0;
        for i in 0..n as usize {
            for j in i + 1..n as usize {
                let a = f.create_qp(&hcas[i], QpMode::Rc).unwrap();
                let b = f.create_qp(&hcas[j], QpMode::Rc).unwrap();
                f.rc_connect(&a, &b).unwrap();
                connections += 1;
            }
        }
        // Counting oracle: n(n-1)/2.
        assert_eq!(connections, 28);
    }

    #[test]
    fn rc_delivery_is_in_order() {
        let cfg = FabricConfig { latency_min: 0, latency_max: 50, rng_seed: 3, ..Default::default() };
        let f = Fabric::new(cfg, 2).unwrap();
        let h0 = f.create_hca(0).unwrap();
        let h1 = f.create_hca(1).unwrap();
        let a = f.create_qp(&h0, QpMode::Rc).unwrap();
        let b = f.create_qp(&h1, QpMode::Rc).unwrap();
        f.rc_connect(&a, &b).unwrap();
        for i in 0..40u32 {
            f.post_send(&a, None, &i.to_le_bytes()).unwrap();
            f.clock().advance_by(1);
        }
        assert_eq!(f.post_send(&a, Some(b.address()), b"x"), Err(FabricError::DestinationMismatch));
        f.clock().advance_by(100);
        let got: Vec<u32> = f
            .poll_recv(&b, 1000)
            .iter()
            .map(|d| u32::from_le_bytes(d.payload[..4].try_into().unwrap()))
            .collect();
        assert_eq!(got, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn rc_send_unpeered_is_rejected() {
        let f = fabric(1);
        let h = f.create_hca(0).unwrap();
        let a = f.create_qp(&h, QpMode::Rc).unwrap();
        assert_eq!(f.post_send(&a, None, b"x"), Err(FabricError::NotConnected));
    }

    #[test]
    fn poll_respects_delivery_time() {
        let cfg = FabricConfig { latency_min: 5, latency_max: 5, ..Default::default() };
        let f = Fabric::new(cfg, 1).unwrap();
        let h = f.create_hca(0).unwrap();
        let a = f.create_qp(&h, QpMode::Ud).unwrap();
        let b = f.create_qp(&h, QpMode::Ud).unwrap();
        assert!(f.poll_recv(&b, 8).is_empty());
        f.post_send(&a, Some(b.address()), b"hi").unwrap();
        f.clock().advance_to(4);
        assert!(f.poll_recv(&b, 8).is_empty());
        f.clock().advance_to(5);
        let got = f.poll_recv(&b, 8);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].payload, b"hi");
        assert_eq!(got[0].src, a.address());
    }

    #[test]
    fn stale_ud_destination_is_blackholed() {
        let f = fabric(2);
        let h0 = f.create_hca(0).unwrap();
        let h1 = f.create_hca(1).unwrap();
        let old = f.create_qp(&h1, QpMode::Ud).unwrap();
        f.reassign_identifiers().unwrap();
        let src = f.create_qp(&f.hca(0).unwrap(), QpMode::Ud).unwrap();
        f.post_send(&src, Some(old.address()), b"lost").unwrap();
        assert_eq!(f.metrics().blackholed, 1);
        assert!(h0.generation == 0);
    }

    #[test]
    fn identity_reassignment_still_isolates_generations() {
        let f = fabric(2);
        let h0 = f.create_hca(0).unwrap();
        let h1 = f.create_hca(1).unwrap();
        let old_dst = f.create_qp(&h1, QpMode::Ud).unwrap();
        assert_eq!(f.reassign_identifiers_with(ReassignMode::Identity).unwrap(), 1);
        let n1 = f.hca(1).unwrap();
        assert_eq!(n1.lid, h1.lid);
        let new_dst = f.create_qp(&n1, QpMode::Ud).unwrap();
        // Numerically identical, different generation.
        assert_eq!((new_dst.lid, new_dst.qpn), (old_dst.lid, old_dst.qpn));
        let src = f.create_qp(&f.hca(0).unwrap(), QpMode::Ud).unwrap();
        f.post_send(&src, Some(old_dst.address()), b"stale").unwrap();
        assert_eq!(f.metrics().blackholed, 1);
        f.clock().advance_by(10);
        assert!(f.poll_recv(&new_dst, 8).is_empty());
        assert!(h0.lid == f.hca(0).unwrap().lid);
    }

    #[test]
    fn reassign_requires_quiesced_fabric() {
        let f = fabric(1);
        let h = f.create_hca(0).unwrap();
        let a = f.create_qp(&h, QpMode::Ud).unwrap();
        let b = f.create_qp(&h, QpMode::Ud).unwrap();
        f.post_send(&a, Some(b.address()), b"x").unwrap();
        assert_eq!(f.reassign_identifiers(), Err(FabricError::InFlight(1)));
        assert_eq!(f.generation(), 0);
        f.kill_all();
        assert_eq!(f.reassign_identifiers(), Ok(1));
        assert!(f.metrics().conserved());
        assert_eq!(f.metrics().discarded_on_kill, 1);
    }

    #[test]
    fn reassignment_is_seed_reproducible() {
        let run = |seed| {
            let f = Fabric::new(FabricConfig { rng_seed: seed, ..Default::default() }, 6).unwrap();
            for n in 0..6 {
                f.create_hca(n).unwrap();
            }
            f.reassign_identifiers().unwrap();
            (0..6).map(|n| f.hca(n).unwrap().lid).collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn qpn_sequence_changes_across_reassignment() {
        let f = Fabric::new(FabricConfig { rng_seed: 5, ..Default::default() }, 1).unwrap();
        let seq = |f: &Fabric| {
            let h = f.hca(0).unwrap();
            (0..3).map(|_| f.create_qp(&h, QpMode::Ud).unwrap().qpn.get()).collect::<Vec<_>>()
        };
        f.create_hca(0).unwrap();
        let before = seq(&f);
        assert_eq!(before, vec![64, 65, 66]);
        f.reassign_identifiers().unwrap();
        let after = seq(&f);
        // Seeded oracle: replay the RNG stream of a fresh fabric.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lids = vec![1u16];
        lids.shuffle(&mut rng);
        let _offset = rng.gen_range(0..=(MAX_LID - 1).min(0x0400));
        let base: u32 = rng.gen_range(INITIAL_QPN_BASE..(1 << 23));
        assert_eq!(after, vec![base, base + 1, base + 2]);
        assert_ne!(before, after);
    }

    #[test]
    fn ud_drops_match_seeded_replay() {
        let cfg = FabricConfig { ud_drop_rate: 0.1, rng_seed: 42, latency_min: 1, latency_max: 4, ..Default::default() };
        let f = Fabric::new(cfg.clone(), 1).unwrap();
        let h = f.create_hca(0).unwrap();
        let a = f.create_qp(&h, QpMode::Ud).unwrap();
        let b = f.create_qp(&h, QpMode::Ud).unwrap();
        for i in 0..1000u32 {
            f.post_send(&a, Some(b.address()), &i.to_le_bytes()).unwrap();
        }
        f.clock().advance_by(10);
        let delivered = f.poll_recv(&b, usize::MAX).len();

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut expected = 0;
        for _ in 0..1000 {
            let _lat: u64 = rng.gen_range(cfg.latency_min..=cfg.latency_max);
            let roll: f64 = rng.gen();
            if roll >= 0.1 {
                expected += 1;
            }
        }
        assert_eq!(delivered, expected);
        let m = f.metrics();
        assert_eq!(m.dropped, 1000 - expected as u64);
        assert!(m.conserved());
    }

    #[test]
    fn interleaved_ud_senders_union() {
        let f = fabric(4);
        let hs: Vec<_> = (0..4).map(|n| f.create_hca(n).unwrap()).collect();
        let dst = f.create_qp(&hs[0], QpMode::Ud).unwrap();
        let srcs: Vec<_> = (1..4).map(|n| f.create_qp(&hs[n], QpMode::Ud).unwrap()).collect();
        let mut sent = Vec::new();
        for round in 0..20u8 {
            for (i, s) in srcs.iter().enumerate() {
                let p = vec![i as u8, round];
                f.post_send(s, Some(dst.address()), &p).unwrap();
                sent.push(p);
            }
        }
        f.clock().advance_by(100);
        let mut got: Vec<_> = f.poll_recv(&dst, usize::MAX).into_iter().map(|d| d.payload).collect();
        got.sort();
        sent.sort();
        assert_eq!(got, sent);
    }

    #[test]
    fn mtu_and_capacity_limits() {
        let cfg = FabricConfig { mtu: 8, queue_capacity: 2, ..Default::default() };
        let f = Fabric::new(cfg, 1).unwrap();
        let h = f.create_hca(0).unwrap();
        let a = f.create_qp(&h, QpMode::Rc).unwrap();
        let b = f.create_qp(&h, QpMode::Rc).unwrap();
        f.rc_connect(&a, &b).unwrap();
        assert!(matches!(f.post_send(&a, None, &[0; 9]), Err(FabricError::PayloadTooLarge { .. })));
        f.post_send(&a, None, b"1").unwrap();
        f.post_send(&a, None, b"2").unwrap();
        assert_eq!(f.post_send(&a, None, b"3"), Err(FabricError::QueueFull));
        assert_eq!(f.queued(&b), 2);
    }

    #[test]
    fn config_validation() {
        assert!(Fabric::new(FabricConfig { latency_min: 5, latency_max: 1, ..Default::default() }, 1).is_err());
        assert!(Fabric::new(FabricConfig { ud_drop_rate: 1.5, ..Default::default() }, 1).is_err());
    }
}
