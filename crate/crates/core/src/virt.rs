//! Stable virtual identities for unreliable-datagram endpoints.
//!
//! Application code names UD endpoints by [`VirtualEndpointId`] and sends
//! through opaque [`ShadowHandleId`]s. The real `(lid, qpn)` behind a virtual
//! id is published to the coordinator store under `ud:<vlid>:<vqpn>` and
//! looked up again whenever the cached one may be out of date. After a
//! restart every owned endpoint gets a new real queue pair and republishes;
//! the virtual ids never change.
//!
//! Every UD payload carries a 12-byte header (source vlid u16, source vqpn
//! u32, destination vlid u16, destination vqpn u32, little-endian) so the
//! receiver can name the sender and verify it was the intended target.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::coordinator::{CoordClient, CoordError, ReplyStatus};
use crate::fabric::{Address, ClockMode, Fabric, FabricError, HcaState, QpMode, QpNum, QueuePair, RealLid, SendToken, Tick, MAX_QPN};

pub const UD_HEADER_LEN: usize = 12;
/// Resolve attempts before a send gives up.
pub const MAX_RESOLVE_ATTEMPTS: u32 = 10;
/// First retry delay in clock units (one tick or one millisecond).
pub const RESOLVE_BASE_DELAY: Tick = 1;

const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VirtualEndpointId {
    pub vlid: u16,
    pub vqpn: u32,
}

impl VirtualEndpointId {
    pub fn new(vlid: u16, vqpn: u32) -> Self {
        Self { vlid, vqpn: vqpn & MAX_QPN }
    }

    pub fn key(&self) -> String {
        format!("ud:{}:{}", self.vlid, self.vqpn)
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.vlid.to_le_bytes());
        out.extend_from_slice(&self.vqpn.to_le_bytes());
    }

    fn decode(b: &[u8]) -> Self {
        Self {
            vlid: u16::from_le_bytes([b[0], b[1]]),
            vqpn: u32::from_le_bytes([b[2], b[3], b[4], b[5]]),
        }
    }
}

impl fmt::Display for VirtualEndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}:{}", self.vlid, self.vqpn)
    }
}

/// Packs a real address as `lid:16 | qpn:24 | generation:24`, little-endian.
pub fn pack_address(a: Address) -> [u8; 8] {
    let v = u64::from(a.lid.0) | (u64::from(a.qpn.get()) << 16) | (u64::from(a.generation & 0xFF_FFFF) << 40);
    v.to_le_bytes()
}

pub fn unpack_address(bytes: &[u8]) -> Option<Address> {
    let v = u64::from_le_bytes(bytes.try_into().ok()?);
    Some(Address {
        lid: RealLid((v & 0xFFFF) as u16),
        qpn: QpNum::new(((v >> 16) & 0xFF_FFFF) as u32)?,
        generation: (v >> 40) as u32,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolvePolicy {
    /// Query the coordinator before every send.
    PerSend,
    /// Query only when the cached address is from an older generation.
    GenerationCached,
}

#[derive(Debug, Error)]
pub enum VirtError {
    #[error("{0} has not been published")]
    NotFound(VirtualEndpointId),
    #[error("{0} is only published for an older generation")]
    Stale(VirtualEndpointId),
    #[error("gave up resolving {vid} after {attempts} attempts")]
    Exhausted { vid: VirtualEndpointId, attempts: u32 },
    #[error("unknown shadow handle {0:?}")]
    UnknownHandle(ShadowHandleId),
    #[error("{0} is not owned by this rank")]
    NotOwned(VirtualEndpointId),
    #[error("queue pair is not in UD mode")]
    NotUd,
    #[error("payload of {0} bytes leaves no room for the endpoint header")]
    PayloadTooLarge(usize),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// Current real address of every virtual id this rank knows about.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TranslationTable {
    pub entries: BTreeMap<VirtualEndpointId, Address>,
    pub local_owned: BTreeSet<VirtualEndpointId>,
}

impl TranslationTable {
    /// The entry, if it belongs to `generation`.
    pub fn current(&self, vid: VirtualEndpointId, generation: u32) -> Option<Address> {
        self.entries.get(&vid).copied().filter(|a| a.generation >= generation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShadowHandleId(pub u32);

/// What the application's address handle stands for: a remote virtual id,
/// plus the real address it was last materialized to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowAddressHandle {
    pub id: ShadowHandleId,
    pub target: VirtualEndpointId,
    pub real_ah: Option<Address>,
}

impl ShadowAddressHandle {
    pub fn is_stale(&self, generation: u32) -> bool {
        self.real_ah.map_or(true, |a| a.generation < generation)
    }
}

/// Checkpointable part of the virtualization state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VirtSnapshot {
    pub table: TranslationTable,
    pub handles: Vec<ShadowAddressHandle>,
    pub next_handle: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Sent(SendToken),
    /// The destination could not be resolved yet; call again at or after `at`.
    Retry { at: Tick },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdMessage {
    pub src: VirtualEndpointId,
    pub dst: VirtualEndpointId,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtStats {
    pub queries: u64,
    pub resolves: u64,
    pub sends: u64,
    pub received: u64,
    pub misdelivered: u64,
    pub malformed: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct RetryState {
    attempts: u32,
    next_at: Tick,
}

/// Per-rank UD virtualization layer.
#[derive(Debug)]
pub struct UdVirt {
    policy: ResolvePolicy,
    table: TranslationTable,
    handles: BTreeMap<ShadowHandleId, ShadowAddressHandle>,
    next_handle: u32,
    local_qps: BTreeMap<VirtualEndpointId, QueuePair>,
    retries: BTreeMap<ShadowHandleId, RetryState>,
    stats: VirtStats,
}

pub fn add_header(src: VirtualEndpointId, dst: VirtualEndpointId, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(UD_HEADER_LEN + payload.len());
    src.encode(&mut out);
    dst.encode(&mut out);
    out.extend_from_slice(payload);
    out
}

pub fn parse_header(raw: &[u8]) -> Option<(VirtualEndpointId, VirtualEndpointId, &[u8])> {
    if raw.len() < UD_HEADER_LEN {
        return None;
    }
    Some((VirtualEndpointId::decode(&raw[0..6]), VirtualEndpointId::decode(&raw[6..12]), &raw[12..]))
}

impl UdVirt {
    pub fn new(policy: ResolvePolicy) -> Self {
        Self {
            policy,
            table: TranslationTable::default(),
            handles: BTreeMap::new(),
            next_handle: 1,
            local_qps: BTreeMap::new(),
            retries: BTreeMap::new(),
            stats: VirtStats::default(),
        }
    }

    /// Rebuilds from a checkpoint. Owned endpoints have no live queue pair
    /// until [`UdVirt::refresh_after_restart`].
    pub fn restore(snapshot: VirtSnapshot, policy: ResolvePolicy) -> Self {
        let mut v = Self::new(policy);
        v.table = snapshot.table;
        v.next_handle = snapshot.next_handle.max(1);
        v.handles = snapshot.handles.into_iter().map(|h| (h.id, h)).collect();
        v
    }

    pub fn snapshot(&self) -> VirtSnapshot {
        VirtSnapshot {
            table: self.table.clone(),
            handles: self.handles.values().copied().collect(),
            next_handle: self.next_handle,
        }
    }

    pub fn policy(&self) -> ResolvePolicy {
        self.policy
    }

    pub fn stats(&self) -> VirtStats {
        self.stats
    }

    pub fn table(&self) -> &TranslationTable {
        &self.table
    }

    pub fn owned(&self) -> impl Iterator<Item = VirtualEndpointId> + '_ {
        self.table.local_owned.iter().copied()
    }

    /// The live queue pair behind an owned id. Harness and oracle use only.
    pub fn local_qp(&self, vid: VirtualEndpointId) -> Option<&QueuePair> {
        self.local_qps.get(&vid)
    }

    /// Handle state including its real materialization. Oracle use only.
    pub fn inspect_handle(&self, id: ShadowHandleId) -> Option<&ShadowAddressHandle> {
        self.handles.get(&id)
    }

    /// Allocates a virtual id for `qp`, first-writer-wins in the coordinator
    /// store, starting from the real pair and stepping the QPN on conflict.
    pub fn register_local_qp(&mut self, client: &mut CoordClient, qp: QueuePair) -> Result<VirtualEndpointId, VirtError> {
        if qp.mode != QpMode::Ud {
            return Err(VirtError::NotUd);
        }
        let addr = qp.address();
        let mut vid = VirtualEndpointId::new(qp.lid.0, qp.qpn.get());
        loop {
            let req = client.send_claim(&vid.key(), pack_address(addr).to_vec(), addr.generation)?;
            let reply = client.wait_reply(req, REPLY_TIMEOUT)?;
            if reply.status == ReplyStatus::ClaimOk {
                break;
            }
            vid = VirtualEndpointId::new(vid.vlid, (vid.vqpn + 1) & MAX_QPN);
        }
        self.table.entries.insert(vid, addr);
        self.table.local_owned.insert(vid);
        self.local_qps.insert(vid, qp);
        Ok(vid)
    }

    /// Creates a UD queue pair on `hca` and registers it.
    pub fn create_endpoint(&mut self, fabric: &Fabric, hca: &HcaState, client: &mut CoordClient) -> Result<VirtualEndpointId, VirtError> {
        let qp = fabric.create_qp(hca, QpMode::Ud)?;
        self.register_local_qp(client, qp)
    }

    /// Creates a handle for `target`. Nothing is resolved until the first send.
    pub fn vcreate_ah(&mut self, target: VirtualEndpointId) -> ShadowHandleId {
        let id = ShadowHandleId(self.next_handle);
        self.next_handle += 1;
        self.handles.insert(id, ShadowAddressHandle { id, target, real_ah: None });
        id
    }

    pub fn destroy_ah(&mut self, id: ShadowHandleId) -> Result<(), VirtError> {
        self.retries.remove(&id);
        self.handles.remove(&id).map(|_| ()).ok_or(VirtError::UnknownHandle(id))
    }

    /// One lookup of `target`'s current real address.
    pub fn resolve(&mut self, fabric: &Fabric, client: &mut CoordClient, target: VirtualEndpointId) -> Result<Address, VirtError> {
        let generation = fabric.generation();
        if let Some(qp) = self.local_qps.get(&target).filter(|q| q.generation == generation) {
            return Ok(qp.address());
        }
        self.stats.queries += 1;
        let reply = client.query(&target.key(), REPLY_TIMEOUT)?;
        if reply.status != ReplyStatus::Found {
            return Err(VirtError::NotFound(target));
        }
        let addr = unpack_address(&reply.value).ok_or(VirtError::NotFound(target))?;
        if addr.generation < generation {
            return Err(VirtError::Stale(target));
        }
        self.stats.resolves += 1;
        self.table.entries.insert(target, addr);
        Ok(addr)
    }

    /// Sends `payload` from owned endpoint `src` to the handle's target.
    /// Unresolvable targets are retried with doubling delays; the caller
    /// repeats the call once the clock reaches the returned time.
    pub fn vsend(
        &mut self,
        fabric: &Fabric,
        client: &mut CoordClient,
        handle: ShadowHandleId,
        src: VirtualEndpointId,
        payload: &[u8],
    ) -> Result<SendOutcome, VirtError> {
        let h = *self.handles.get(&handle).ok_or(VirtError::UnknownHandle(handle))?;
        let qp = *self.local_qps.get(&src).ok_or(VirtError::NotOwned(src))?;
        if payload.len() + UD_HEADER_LEN > fabric.config().mtu {
            return Err(VirtError::PayloadTooLarge(payload.len()));
        }
        let now = fabric.now();
        if let Some(r) = self.retries.get(&handle) {
            if now < r.next_at {
                return Ok(SendOutcome::Retry { at: r.next_at });
            }
        }
        let generation = fabric.generation();
        let needs_resolve = match self.policy {
            ResolvePolicy::PerSend => true,
            ResolvePolicy::GenerationCached => h.is_stale(generation),
        };
        let real = if needs_resolve {
            match self.resolve(fabric, client, h.target) {
                Ok(a) => {
                    self.retries.remove(&handle);
                    self.handles.get_mut(&handle).unwrap().real_ah = Some(a);
                    a
                }
                Err(VirtError::NotFound(_) | VirtError::Stale(_)) => {
                    let r = self.retries.entry(handle).or_default();
                    r.attempts += 1;
                    if r.attempts >= MAX_RESOLVE_ATTEMPTS {
                        let attempts = r.attempts;
                        self.retries.remove(&handle);
                        return Err(VirtError::Exhausted { vid: h.target, attempts });
                    }
                    r.next_at = now + (RESOLVE_BASE_DELAY << (r.attempts - 1));
                    return Ok(SendOutcome::Retry { at: r.next_at });
                }
                Err(e) => return Err(e),
            }
        } else {
            h.real_ah.expect("fresh handle has an address")
        };
        let token = fabric.post_send(&qp, Some(real), &add_header(src, h.target, payload))?;
        self.stats.sends += 1;
        Ok(SendOutcome::Sent(token))
    }

    /// [`UdVirt::vsend`], waiting out retries on the fabric clock.
    pub fn vsend_blocking(
        &mut self,
        fabric: &Fabric,
        client: &mut CoordClient,
        handle: ShadowHandleId,
        src: VirtualEndpointId,
        payload: &[u8],
    ) -> Result<SendToken, VirtError> {
        loop {
            match self.vsend(fabric, client, handle, src, payload)? {
                SendOutcome::Sent(t) => return Ok(t),
                SendOutcome::Retry { at } => match fabric.clock().mode() {
                    ClockMode::Virtual => fabric.clock().advance_to(at),
                    ClockMode::Wall => fabric.clock().sleep_until(at),
                },
            }
        }
    }

    /// Interprets a raw UD payload that arrived on owned endpoint `local`.
    /// Payloads addressed to a different virtual id are counted and dropped.
    pub fn accept(&mut self, local: VirtualEndpointId, raw: &[u8]) -> Option<UdMessage> {
        let Some((src, dst, payload)) = parse_header(raw) else {
            self.stats.malformed += 1;
            return None;
        };
        if dst != local {
            self.stats.misdelivered += 1;
            return None;
        }
        self.stats.received += 1;
        Some(UdMessage { src, dst, payload: payload.to_vec() })
    }

    /// Polls the fabric for up to `max` datagrams on owned endpoint `local`.
    pub fn vrecv(&mut self, fabric: &Fabric, local: VirtualEndpointId, max: usize) -> Result<Vec<UdMessage>, VirtError> {
        let qp = *self.local_qps.get(&local).ok_or(VirtError::NotOwned(local))?;
        let raw = fabric.poll_recv(&qp, max);
        Ok(raw.iter().filter_map(|d| self.accept(local, &d.payload)).collect())
    }

    /// After the fabric moved to a new generation: recreates a queue pair on
    /// `hca` for every owned id, republishes each, and invalidates every
    /// shadow handle. Returns the number of endpoints republished.
    pub fn refresh_after_restart(&mut self, fabric: &Fabric, hca: &HcaState, client: &mut CoordClient) -> Result<usize, VirtError> {
        let owned: Vec<_> = self.table.local_owned.iter().copied().collect();
        for vid in &owned {
            let qp = fabric.create_qp(hca, QpMode::Ud)?;
            let addr = qp.address();
            client.publish(&vid.key(), pack_address(addr).to_vec(), addr.generation)?;
            self.table.entries.insert(*vid, addr);
            self.local_qps.insert(*vid, qp);
        }
        for h in self.handles.values_mut() {
            h.real_ah = None;
        }
        self.retries.clear();
        Ok(owned.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_format() {
        assert_eq!(VirtualEndpointId::new(3, 70).key(), "ud:3:70");
    }

    #[test]
    fn packed_layout() {
        let a = Address { lid: RealLid(0x1234), qpn: QpNum::new(0xABCDEF).unwrap(), generation: 0x010203 };
        assert_eq!(pack_address(a), [0x34, 0x12, 0xEF, 0xCD, 0xAB, 0x03, 0x02, 0x01]);
        assert_eq!(unpack_address(&pack_address(a)), Some(a));
    }

    #[test]
    fn header_round_trip() {
        let s = VirtualEndpointId::new(1, 64);
        let d = VirtualEndpointId::new(2, 0xFFFFFF);
        let raw = add_header(s, d, b"hi");
        assert_eq!(raw.len(), UD_HEADER_LEN + 2);
        assert_eq!(parse_header(&raw), Some((s, d, &b"hi"[..])));
        assert_eq!(parse_header(&raw[..5]), None);
    }
}
