//! Deterministic SPMD workloads.
//!
//! Every rank holds a 64-bit `value`. Each iteration exchanges values with
//! peers and folds what it receives into its own value with [`mix`]. The
//! arithmetic per kind:
//!
//! * RING: `v[r] = mix(v[r], v[r-1], i)`.
//! * STENCIL: `v[r] = mix(mix(v[r], v[r+1], i), v[r-1], i)` over RC, then on
//!   odd iterations every rank sends its new value by datagram to
//!   `(r + 1 + (i/2) mod (n-1)) mod n` and mixes in the one it receives.
//! * ALLREDUCE: `v[r] = mix(v[r], sum(v), i)` with the wrapping sum computed
//!   by recursive doubling; ranks beyond the largest power of two fold in
//!   through a partner first and receive the result last.
//!
//! With one rank there is no communication and every kind reduces to
//! `v = mix(v, v, i)`. An optional heap of memory regions is read and
//! written once per iteration so that restarts must restore it faithfully.

use serde::{Deserialize, Serialize};

use crate::ckpt::{AppStep, Application, CkptError, Comm};
use crate::fabric::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    Ring,
    Stencil,
    Allreduce,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 3] = [WorkloadKind::Ring, WorkloadKind::Stencil, WorkloadKind::Allreduce];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Ring => "ring",
            WorkloadKind::Stencil => "stencil",
            WorkloadKind::Allreduce => "allreduce",
        }
    }
}

impl std::str::FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ring" => Ok(WorkloadKind::Ring),
            "stencil" => Ok(WorkloadKind::Stencil),
            "allreduce" => Ok(WorkloadKind::Allreduce),
            other => Err(format!("unknown workload `{other}`")),
        }
    }
}

/// Memory regions `heap.0000`, `heap.0001`, ... of `region_bytes` each.
/// Iteration `i` touches region `i mod touch`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapSpec {
    pub regions: u32,
    pub region_bytes: u64,
    pub touch: u32,
}

impl HeapSpec {
    pub fn is_empty(&self) -> bool {
        self.regions == 0
    }

    pub fn total_bytes(&self) -> u64 {
        self.regions as u64 * self.region_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub ranks: u32,
    pub nodes: u32,
    pub iterations: u32,
    pub payload_bytes: usize,
    pub seed: u64,
    #[serde(default)]
    pub heap: HeapSpec,
}

/// Bytes of every application message ahead of the payload: iteration and tag.
pub const MSG_HEADER_LEN: usize = 8;

const UD_TAG: u32 = 0xFFFF;

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, ranks: u32, nodes: u32, iterations: u32, seed: u64) -> Self {
        Self { kind, ranks, nodes, iterations, payload_bytes: 64, seed, heap: HeapSpec::default() }
    }

    pub fn validate(&self, mtu: usize) -> Result<(), String> {
        if self.ranks == 0 || self.nodes == 0 {
            return Err("ranks and nodes must be positive".into());
        }
        if self.ranks % self.nodes != 0 {
            return Err(format!("{} ranks do not divide evenly over {} nodes", self.ranks, self.nodes));
        }
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        let max = mtu.saturating_sub(crate::virt::UD_HEADER_LEN + MSG_HEADER_LEN);
        if self.payload_bytes < 8 || self.payload_bytes > max {
            return Err(format!("payload_bytes must be in 8..={max}"));
        }
        let h = &self.heap;
        if h.regions > 0 && (h.region_bytes < 8 || h.region_bytes % 8 != 0 || h.touch > h.regions) {
            return Err("heap regions need a positive multiple of 8 bytes and touch <= regions".into());
        }
        Ok(())
    }

    pub fn ranks_per_node(&self) -> u32 {
        self.ranks / self.nodes
    }

    pub fn node_of(&self, rank: u32) -> u32 {
        rank / self.ranks_per_node()
    }

    /// Peers this rank talks to over RC, sorted.
    pub fn rc_peers(&self, rank: u32) -> Vec<u32> {
        let n = self.ranks;
        let mut peers = Vec::new();
        if n > 1 {
            match self.kind {
                WorkloadKind::Ring | WorkloadKind::Stencil => {
                    peers.push((rank + 1) % n);
                    peers.push((rank + n - 1) % n);
                }
                WorkloadKind::Allreduce => {
                    let (p2, rem) = split_pow2(n);
                    if rank >= p2 {
                        peers.push(rank - p2);
                    } else {
                        if rank < rem {
                            peers.push(rank + p2);
                        }
                        let mut mask = 1;
                        while mask < p2 {
                            peers.push(rank ^ mask);
                            mask <<= 1;
                        }
                    }
                }
            }
        }
        peers.sort_unstable();
        peers.dedup();
        peers
    }

    /// Peers this rank may exchange datagrams with.
    pub fn ud_peers(&self, rank: u32) -> Vec<u32> {
        match self.kind {
            WorkloadKind::Stencil if self.ranks > 1 => (0..self.ranks).filter(|r| *r != rank).collect(),
            _ => Vec::new(),
        }
    }
}

/// Largest power of two not above `n`, and how many ranks exceed it.
fn split_pow2(n: u32) -> (u32, u32) {
    let p2 = 1u32 << (31 - n.leading_zeros());
    (p2, n - p2)
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(acc: u64, x: u64, iteration: u32) -> u64 {
    splitmix64(acc ^ x.rotate_left(23) ^ (iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn initial_value(seed: u64, rank: u32) -> u64 {
    splitmix64(seed ^ ((rank as u64 + 1) << 32))
}

/// `len` bytes of the chain `v, splitmix64(v), ...` in little-endian words.
pub fn expand(v: u64, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + 8);
    let mut c = v;
    while out.len() < len {
        out.extend_from_slice(&c.to_le_bytes());
        c = splitmix64(c);
    }
    out.truncate(len);
    out
}

pub fn heap_tag(region: u32) -> String {
    format!("heap.{region:04}")
}

pub fn initial_heap_region(seed: u64, rank: u32, region: u32, bytes: u64) -> Vec<u8> {
    expand(splitmix64(initial_value(seed, rank) ^ (region as u64 + 1)), bytes as usize)
}

/// Order-insensitive fold of per-rank digests.
pub fn combine_digests(digests: &[u64]) -> u64 {
    let mut sorted = digests.to_vec();
    sorted.sort_unstable();
    let bytes: Vec<u8> = sorted.iter().flat_map(|d| d.to_le_bytes()).collect();
    fnv1a(&bytes)
}

/// Digest of one rank's final state: its value and the CRC of each heap region.
pub fn rank_digest(rank: u32, value: u64, heap_crcs: &[u32]) -> u64 {
    let mut bytes = Vec::with_capacity(12 + 4 * heap_crcs.len());
    bytes.extend_from_slice(&rank.to_le_bytes());
    bytes.extend_from_slice(&value.to_le_bytes());
    for c in heap_crcs {
        bytes.extend_from_slice(&c.to_le_bytes());
    }
    fnv1a(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    SendValue { peer: u32, tag: u32 },
    SendAcc { peer: u32, tag: u32 },
    RecvMix { peer: u32, tag: u32 },
    RecvAdd { peer: u32, tag: u32 },
    RecvSetAcc { peer: u32, tag: u32 },
    SetAcc,
    MixAcc,
    SelfMix,
    UdSend { peer: u32 },
    UdRecvMix { from: u32 },
    Heap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Buffered {
    peer: u32,
    iteration: u32,
    tag: u32,
    value: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadApp {
    spec: WorkloadSpec,
    rank: u32,
    iteration: u32,
    pc: u32,
    value: u64,
    acc: u64,
    inbox: Vec<Buffered>,
    ud_inbox: Vec<Buffered>,
}

impl WorkloadApp {
    pub fn new(spec: WorkloadSpec, rank: u32) -> Self {
        let value = initial_value(spec.seed, rank);
        Self { spec, rank, iteration: 0, pc: 0, value, acc: 0, inbox: Vec::new(), ud_inbox: Vec::new() }
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    /// Position within the current iteration.
    pub fn pc(&self) -> u32 {
        self.pc
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.spec.iterations
    }

    fn plan(&self) -> Vec<Action> {
        let (r, n, i) = (self.rank, self.spec.ranks, self.iteration);
        let mut plan = Vec::new();
        if n == 1 {
            plan.push(Action::SelfMix);
        } else {
            let next = (r + 1) % n;
            let prev = (r + n - 1) % n;
            match self.spec.kind {
                WorkloadKind::Ring => {
                    plan.push(Action::SendValue { peer: next, tag: 0 });
                    plan.push(Action::RecvMix { peer: prev, tag: 0 });
                }
                WorkloadKind::Stencil => {
                    // Tag 1 travels rightwards, tag 0 leftwards.
                    plan.push(Action::SendValue { peer: next, tag: 1 });
                    plan.push(Action::SendValue { peer: prev, tag: 0 });
                    plan.push(Action::RecvMix { peer: next, tag: 0 });
                    plan.push(Action::RecvMix { peer: prev, tag: 1 });
                    if i % 2 == 1 {
                        let k = (i / 2) % (n - 1);
                        plan.push(Action::UdSend { peer: (r + 1 + k) % n });
                        plan.push(Action::UdRecvMix { from: (r + 2 * n - 1 - k) % n });
                    }
                }
                WorkloadKind::Allreduce => {
                    let (p2, rem) = split_pow2(n);
                    plan.push(Action::SetAcc);
                    if r >= p2 {
                        plan.push(Action::SendAcc { peer: r - p2, tag: 100 });
                        plan.push(Action::RecvSetAcc { peer: r - p2, tag: 101 });
                    } else {
                        if r < rem {
                            plan.push(Action::RecvAdd { peer: r + p2, tag: 100 });
                        }
                        let mut mask = 1;
                        let mut round = 0;
                        while mask < p2 {
                            plan.push(Action::SendAcc { peer: r ^ mask, tag: 200 + round });
                            plan.push(Action::RecvAdd { peer: r ^ mask, tag: 200 + round });
                            mask <<= 1;
                            round += 1;
                        }
                        if r < rem {
                            plan.push(Action::SendAcc { peer: r + p2, tag: 101 });
                        }
                    }
                    plan.push(Action::MixAcc);
                }
            }
        }
        if self.spec.heap.regions > 0 && self.spec.heap.touch > 0 {
            plan.push(Action::Heap);
        }
        plan
    }

    fn message(&self, tag: u32, v: u64) -> Vec<u8> {
        let mut m = Vec::with_capacity(MSG_HEADER_LEN + self.spec.payload_bytes);
        m.extend_from_slice(&self.iteration.to_le_bytes());
        m.extend_from_slice(&tag.to_le_bytes());
        m.extend_from_slice(&expand(v, self.spec.payload_bytes));
        m
    }

    fn parse(&self, peer: u32, raw: &[u8]) -> Result<Buffered, CkptError> {
        let corrupt = || CkptError::App(format!("rank {}: corrupt message from rank {peer}", self.rank));
        if raw.len() != MSG_HEADER_LEN + self.spec.payload_bytes {
            return Err(corrupt());
        }
        let iteration = u32::from_le_bytes(raw[0..4].try_into().unwrap());
        let tag = u32::from_le_bytes(raw[4..8].try_into().unwrap());
        let value = u64::from_le_bytes(raw[8..16].try_into().unwrap());
        if raw[MSG_HEADER_LEN..] != expand(value, self.spec.payload_bytes)[..] {
            return Err(corrupt());
        }
        Ok(Buffered { peer, iteration, tag, value })
    }

    fn take(buf: &mut Vec<Buffered>, peer: u32, iteration: u32, tag: u32) -> Option<u64> {
        let i = buf.iter().position(|b| b.peer == peer && b.iteration == iteration && b.tag == tag)?;
        Some(buf.remove(i).value)
    }

    fn recv_rc(&mut self, comm: &mut Comm, peer: u32, tag: u32) -> Result<Option<u64>, CkptError> {
        loop {
            if let Some(v) = Self::take(&mut self.inbox, peer, self.iteration, tag) {
                return Ok(Some(v));
            }
            match comm.rc_recv(peer)? {
                Some(raw) => {
                    let m = self.parse(peer, &raw)?;
                    self.inbox.push(m);
                }
                None => return Ok(None),
            }
        }
    }

    fn recv_ud(&mut self, comm: &mut Comm, from: u32) -> Result<Option<u64>, CkptError> {
        loop {
            if let Some(v) = Self::take(&mut self.ud_inbox, from, self.iteration, UD_TAG) {
                return Ok(Some(v));
            }
            match comm.ud_recv()? {
                Some((src, raw)) => {
                    let m = self.parse(src, &raw)?;
                    if m.tag != UD_TAG || m.iteration % 2 == 0 {
                        return Err(CkptError::App(format!("rank {}: unexpected datagram from rank {src}", self.rank)));
                    }
                    self.ud_inbox.push(m);
                }
                None => return Ok(None),
            }
        }
    }

    fn touch_heap(&mut self, comm: &mut Comm) -> Result<(), CkptError> {
        let h = self.spec.heap;
        let region = self.iteration % h.touch;
        let tag = heap_tag(region);
        let bytes = comm
            .memory()
            .get_mut(&tag)?
            .ok_or_else(|| CkptError::App(format!("rank {}: heap region {tag} missing", self.rank)))?;
        let words = bytes.len() / 8;
        let read = (self.value % words as u64) as usize * 8;
        let w = u64::from_le_bytes(bytes[read..read + 8].try_into().unwrap());
        self.value = mix(self.value, w, self.iteration);
        let write = (self.iteration as usize % words) * 8;
        bytes[write..write + 8].copy_from_slice(&self.value.to_le_bytes());
        Ok(())
    }
}

impl Application for WorkloadApp {
    fn save(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("workload state serializes")
    }

    fn load(bytes: &[u8]) -> Result<Self, String> {
        serde_json::from_slice(bytes).map_err(|e| e.to_string())
    }

    fn step(&mut self, comm: &mut Comm) -> Result<AppStep, CkptError> {
        if self.is_done() {
            return Ok(AppStep::Finished);
        }
        let plan = self.plan();
        let i = self.iteration;
        match plan[self.pc as usize] {
            Action::SendValue { peer, tag } => comm.rc_send(peer, &self.message(tag, self.value))?,
            Action::SendAcc { peer, tag } => comm.rc_send(peer, &self.message(tag, self.acc))?,
            Action::RecvMix { peer, tag } => match self.recv_rc(comm, peer, tag)? {
                Some(w) => self.value = mix(self.value, w, i),
                None => return Ok(AppStep::Blocked(None)),
            },
            Action::RecvAdd { peer, tag } => match self.recv_rc(comm, peer, tag)? {
                Some(w) => self.acc = self.acc.wrapping_add(w),
                None => return Ok(AppStep::Blocked(None)),
            },
            Action::RecvSetAcc { peer, tag } => match self.recv_rc(comm, peer, tag)? {
                Some(w) => self.acc = w,
                None => return Ok(AppStep::Blocked(None)),
            },
            Action::SetAcc => self.acc = self.value,
            Action::MixAcc => self.value = mix(self.value, self.acc, i),
            Action::SelfMix => self.value = mix(self.value, self.value, i),
            Action::UdSend { peer } => {
                if let Some(at) = comm.ud_send(peer, &self.message(UD_TAG, self.value))? {
                    return Ok(AppStep::Blocked(Some(at)));
                }
            }
            Action::UdRecvMix { from } => match self.recv_ud(comm, from)? {
                Some(w) => self.value = mix(self.value, w, i),
                None => return Ok(AppStep::Blocked(None)),
            },
            Action::Heap => self.touch_heap(comm)?,
        }
        self.pc += 1;
        if self.pc as usize == plan.len() {
            self.pc = 0;
            self.iteration += 1;
        }
        Ok(AppStep::Progress)
    }
}
