//! The communication endpoints a rank's application uses, wrapped so they
//! can be drained, saved and rebuilt.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::image::{Channel, DrainedMessage};
use super::memory::Memory;
use super::CkptError;
use crate::coordinator::{CoordClient, ReplyStatus};
use crate::fabric::{Fabric, HcaState, QpMode, QueuePair, Tick};
use crate::virt::{pack_address, unpack_address, SendOutcome, ShadowHandleId, UdVirt, VirtualEndpointId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommCounters {
    pub rc_sent: u64,
    pub rc_received: u64,
    pub ud_sent: u64,
    pub ud_received: u64,
    /// Messages handed to the application from the drained store.
    pub redelivered: u64,
}

/// Serialized into the `comm` region of every image.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct CommState {
    pub rc_peers: Vec<u32>,
    /// `(vlid, vqpn)` of the owned datagram endpoint.
    pub ud: Option<(u16, u32)>,
    /// `(rank, vlid, vqpn, handle)` for every datagram peer.
    pub ud_peers: Vec<(u32, u16, u32, u32)>,
}

pub fn rc_key(a: u32, b: u32, publisher: u32) -> String {
    format!("rc:{}:{}:{}", a.min(b), a.max(b), publisher)
}

pub fn udvid_key(rank: u32) -> String {
    format!("udvid:{rank}")
}

pub struct Comm {
    rank: u32,
    node: u32,
    ranks: u32,
    fabric: Arc<Fabric>,
    pub(crate) client: CoordClient,
    pub(crate) virt: UdVirt,
    rc: BTreeMap<u32, QueuePair>,
    rc_peers: Vec<u32>,
    ud: Option<VirtualEndpointId>,
    ud_peers: BTreeMap<u32, (VirtualEndpointId, ShadowHandleId)>,
    ud_rank_of: BTreeMap<VirtualEndpointId, u32>,
    mailbox: BTreeMap<Channel, VecDeque<Vec<u8>>>,
    pub(crate) memory: Memory,
    counters: CommCounters,
}

impl Comm {
    pub(crate) fn new(rank: u32, node: u32, ranks: u32, fabric: Arc<Fabric>, client: CoordClient, virt: UdVirt) -> Self {
        Self {
            rank,
            node,
            ranks,
            fabric,
            client,
            virt,
            rc: BTreeMap::new(),
            rc_peers: Vec::new(),
            ud: None,
            ud_peers: BTreeMap::new(),
            ud_rank_of: BTreeMap::new(),
            mailbox: BTreeMap::new(),
            memory: Memory::new(),
            counters: CommCounters::default(),
        }
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn node(&self) -> u32 {
        self.node
    }

    pub fn ranks(&self) -> u32 {
        self.ranks
    }

    pub fn now(&self) -> Tick {
        self.fabric.now()
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn counters(&self) -> CommCounters {
        self.counters
    }

    pub fn client(&self) -> &CoordClient {
        &self.client
    }

    pub fn virt(&self) -> &UdVirt {
        &self.virt
    }

    pub fn memory(&mut self) -> &mut Memory {
        &mut self.memory
    }

    pub fn ud_endpoint(&self) -> Option<VirtualEndpointId> {
        self.ud
    }

    pub fn rc_qp(&self, peer: u32) -> Option<&QueuePair> {
        self.rc.get(&peer)
    }

    pub fn rc_send(&mut self, peer: u32, payload: &[u8]) -> Result<(), CkptError> {
        let qp = *self.rc.get(&peer).ok_or(CkptError::NoChannel(peer))?;
        self.fabric.post_send(&qp, None, payload)?;
        self.counters.rc_sent += 1;
        Ok(())
    }

    /// Next message from `peer`: drained ones first, then the fabric.
    pub fn rc_recv(&mut self, peer: u32) -> Result<Option<Vec<u8>>, CkptError> {
        if let Some(m) = self.mailbox.get_mut(&Channel::Rc(peer)).and_then(|q| q.pop_front()) {
            self.counters.redelivered += 1;
            self.counters.rc_received += 1;
            return Ok(Some(m));
        }
        let qp = *self.rc.get(&peer).ok_or(CkptError::NoChannel(peer))?;
        let got = self.fabric.poll_recv(&qp, 1).pop().map(|d| d.payload);
        if got.is_some() {
            self.counters.rc_received += 1;
        }
        Ok(got)
    }

    /// `Ok(Some(t))` means the destination is not resolvable yet; retry at `t`.
    pub fn ud_send(&mut self, peer: u32, payload: &[u8]) -> Result<Option<Tick>, CkptError> {
        let (_, handle) = *self.ud_peers.get(&peer).ok_or(CkptError::NoChannel(peer))?;
        let src = self.ud.ok_or(CkptError::NoChannel(peer))?;
        match self.virt.vsend(&self.fabric, &mut self.client, handle, src, payload)? {
            SendOutcome::Sent(_) => {
                self.counters.ud_sent += 1;
                Ok(None)
            }
            SendOutcome::Retry { at } => Ok(Some(at)),
        }
    }

    /// Next datagram addressed to this rank, with the sender's rank.
    pub fn ud_recv(&mut self) -> Result<Option<(u32, Vec<u8>)>, CkptError> {
        let Some(local) = self.ud else { return Ok(None) };
        loop {
            let (raw, redelivered) = match self.mailbox.get_mut(&Channel::Ud(local)).and_then(|q| q.pop_front()) {
                Some(m) => (m, true),
                None => {
                    let qp = *self.virt.local_qp(local).ok_or(CkptError::NoChannel(self.rank))?;
                    match self.fabric.poll_recv(&qp, 1).pop() {
                        Some(d) => (d.payload, false),
                        None => return Ok(None),
                    }
                }
            };
            if redelivered {
                self.counters.redelivered += 1;
            }
            let Some(msg) = self.virt.accept(local, &raw) else { continue };
            let Some(src) = self.ud_rank_of.get(&msg.src).copied() else { continue };
            self.counters.ud_received += 1;
            return Ok(Some((src, msg.payload)));
        }
    }

    /// Moves every datagram due at or before `limit` into the drained store.
    pub(crate) fn drain_poll(&mut self, limit: Tick) -> usize {
        let mut moved = 0;
        for (peer, qp) in &self.rc {
            for d in self.fabric.poll_recv_until(qp, usize::MAX, limit) {
                self.mailbox.entry(Channel::Rc(*peer)).or_default().push_back(d.payload);
                moved += 1;
            }
        }
        if let Some(local) = self.ud {
            if let Some(qp) = self.virt.local_qp(local) {
                for d in self.fabric.poll_recv_until(qp, usize::MAX, limit) {
                    self.mailbox.entry(Channel::Ud(local)).or_default().push_back(d.payload);
                    moved += 1;
                }
            }
        }
        moved
    }

    /// Undelivered drained messages, by channel then arrival order.
    pub fn drained(&self) -> Vec<DrainedMessage> {
        self.mailbox
            .iter()
            .flat_map(|(c, q)| q.iter().map(|p| DrainedMessage { channel: *c, payload: p.clone() }))
            .collect()
    }

    pub fn drained_len(&self) -> usize {
        self.mailbox.values().map(|q| q.len()).sum()
    }

    pub(crate) fn set_drained(&mut self, drained: Vec<DrainedMessage>) {
        self.mailbox.clear();
        for m in drained {
            self.mailbox.entry(m.channel).or_default().push_back(m.payload);
        }
    }

    pub(crate) fn state(&self) -> CommState {
        CommState {
            rc_peers: self.rc_peers.clone(),
            ud: self.ud.map(|v| (v.vlid, v.vqpn)),
            ud_peers: self.ud_peers.iter().map(|(r, (v, h))| (*r, v.vlid, v.vqpn, h.0)).collect(),
        }
    }

    pub(crate) fn apply_state(&mut self, s: CommState) {
        self.rc_peers = s.rc_peers;
        self.ud = s.ud.map(|(l, q)| VirtualEndpointId::new(l, q));
        self.ud_peers.clear();
        self.ud_rank_of.clear();
        for (r, l, q, h) in s.ud_peers {
            let v = VirtualEndpointId::new(l, q);
            self.ud_peers.insert(r, (v, ShadowHandleId(h)));
            self.ud_rank_of.insert(v, r);
        }
    }

    fn hca(&self) -> Result<HcaState, CkptError> {
        self.fabric.hca(self.node).ok_or(CkptError::Fabric(crate::fabric::FabricError::UnknownNode(self.node)))
    }

    /// Creates an RC queue pair per peer and publishes each address.
    pub(crate) fn open_rc(&mut self, peers: &[u32]) -> Result<(), CkptError> {
        let hca = self.hca()?;
        self.rc_peers = peers.to_vec();
        self.rc.clear();
        for &peer in peers {
            let qp = self.fabric.create_qp(&hca, QpMode::Rc)?;
            self.client.publish(&rc_key(self.rank, peer, self.rank), pack_address(qp.address()).to_vec(), qp.generation)?;
            self.rc.insert(peer, qp);
        }
        Ok(())
    }

    /// Looks up every peer's published address and connects this side.
    pub(crate) fn connect_rc(&mut self) -> Result<(), CkptError> {
        let generation = self.fabric.generation();
        for (peer, qp) in &self.rc {
            let key = rc_key(self.rank, *peer, *peer);
            let reply = self.client.query(&key, super::REPLY_TIMEOUT)?;
            let addr = (reply.status == ReplyStatus::Found)
                .then(|| unpack_address(&reply.value))
                .flatten()
                .filter(|a| a.generation == generation)
                .ok_or_else(|| CkptError::MissingPeer(key.clone()))?;
            self.fabric.rc_connect_remote(qp, addr)?;
        }
        Ok(())
    }

    /// Creates and publishes the owned datagram endpoint.
    pub(crate) fn open_ud(&mut self) -> Result<(), CkptError> {
        let hca = self.hca()?;
        let vid = self.virt.create_endpoint(&self.fabric, &hca, &mut self.client)?;
        let mut value = vid.vlid.to_le_bytes().to_vec();
        value.extend_from_slice(&vid.vqpn.to_le_bytes());
        self.client.publish(&udvid_key(self.rank), value, self.fabric.generation())?;
        self.ud = Some(vid);
        Ok(())
    }

    /// Learns each peer's virtual endpoint and creates a handle for it.
    pub(crate) fn connect_ud(&mut self, peers: &[u32]) -> Result<(), CkptError> {
        for &peer in peers {
            let key = udvid_key(peer);
            let reply = self.client.query(&key, super::REPLY_TIMEOUT)?;
            if reply.status != ReplyStatus::Found || reply.value.len() != 6 {
                return Err(CkptError::MissingPeer(key));
            }
            let v = VirtualEndpointId::new(
                u16::from_le_bytes([reply.value[0], reply.value[1]]),
                u32::from_le_bytes(reply.value[2..6].try_into().unwrap()),
            );
            let h = self.virt.vcreate_ah(v);
            self.ud_peers.insert(peer, (v, h));
            self.ud_rank_of.insert(v, peer);
        }
        Ok(())
    }

    pub(crate) fn refresh_ud(&mut self) -> Result<usize, CkptError> {
        let hca = self.hca()?;
        Ok(self.virt.refresh_after_restart(&self.fabric, &hca, &mut self.client)?)
    }

    pub(crate) fn rc_peers(&self) -> Vec<u32> {
        self.rc_peers.clone()
    }
}
