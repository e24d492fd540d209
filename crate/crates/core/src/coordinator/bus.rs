//! In-process transport for the coordinator.
//!
//! Every frame is encoded and decoded at each hop, so the bus exercises the
//! wire format exactly as the socket transport does. Dispatch is synchronous:
//! a `send` returns after the root and any sub-coordinator have processed the
//! frame and all resulting replies are queued in endpoint inboxes.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::root::{Outbound, RootCore};
use super::sub::{SubCore, SubOut};
use super::wire::ControlMessage;
use super::{CoordConfig, CoordError, Session, SessionId};
use crate::fabric::{Clock, Tick};

/// Where a rank's control connection terminates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attach {
    Root,
    Node(u32),
}

struct Endpoint {
    attach: Attach,
    inbox: VecDeque<ControlMessage>,
    closed: bool,
}

struct SubNode {
    core: SubCore,
    root_session: SessionId,
}

enum Hop {
    FromEndpoint(SessionId, ControlMessage),
    ToRoot(SessionId, ControlMessage),
    ToSub(u32, ControlMessage),
}

struct BusInner {
    root: RootCore,
    subs: BTreeMap<u32, SubNode>,
    sub_by_session: HashMap<SessionId, u32>,
    endpoints: HashMap<SessionId, Endpoint>,
    next_id: SessionId,
    frames: u64,
    bytes: u64,
    root_connects: u64,
}

pub struct Bus {
    inner: Mutex<BusInner>,
    cond: Condvar,
    clock: Arc<Clock>,
}

impl Bus {
    pub fn new(expected: u32, config: CoordConfig, clock: Arc<Clock>) -> Arc<Self> {
        Arc::new(Self {
            inner: Mutex::new(BusInner {
                root: RootCore::new(expected, config),
                subs: BTreeMap::new(),
                sub_by_session: HashMap::new(),
                endpoints: HashMap::new(),
                next_id: 1,
                frames: 0,
                bytes: 0,
                root_connects: 0,
            }),
            cond: Condvar::new(),
            clock,
        })
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    /// Starts a sub-coordinator on `node` and registers it with the root.
    pub fn start_sub(&self, node: u32, expected_local: u32) -> Result<(), CoordError> {
        let mut g = self.inner.lock();
        let inner = &mut *g;
        let id = inner.alloc();
        inner.root.open_session(id)?;
        inner.root_connects += 1;
        let core = SubCore::new(node, expected_local);
        let reg = core.register_message();
        inner.subs.insert(node, SubNode { core, root_session: id });
        inner.sub_by_session.insert(id, node);
        self.dispatch(inner, Hop::ToRoot(id, reg));
        match inner.subs[&node].core.registered_with_root() {
            Some(true) => Ok(()),
            _ => Err(CoordError::Rejected(format!("sub-coordinator for node {node}"))),
        }
    }

    pub fn connect(self: &Arc<Self>, attach: Attach) -> Result<BusSession, CoordError> {
        let mut g = self.inner.lock();
        let inner = &mut *g;
        let id = inner.alloc();
        match attach {
            Attach::Root => {
                inner.root.open_session(id)?;
                inner.root_connects += 1;
            }
            Attach::Node(n) => {
                if !inner.subs.contains_key(&n) {
                    return Err(CoordError::UnknownSub(n));
                }
            }
        }
        inner.endpoints.insert(id, Endpoint { attach, inbox: VecDeque::new(), closed: false });
        Ok(BusSession { bus: Arc::clone(self), id, open: true })
    }

    /// Kills the sub-coordinator on `node`; its ranks lose their connections.
    pub fn kill_sub(&self, node: u32) {
        let mut g = self.inner.lock();
        let inner = &mut *g;
        let Some(sub) = inner.subs.remove(&node) else { return };
        inner.sub_by_session.remove(&sub.root_session);
        for ep in inner.endpoints.values_mut() {
            if ep.attach == Attach::Node(node) {
                ep.closed = true;
            }
        }
        let outs = inner.root.close_session(self.clock.now(), sub.root_session);
        let mut queue = VecDeque::new();
        self.route_root_outputs(inner, outs, &mut queue);
        self.run(inner, queue);
        self.cond.notify_all();
    }

    pub fn request_checkpoint(&self) -> Result<u32, CoordError> {
        let mut g = self.inner.lock();
        let inner = &mut *g;
        let (id, outs) = inner.root.request_checkpoint()?;
        let mut queue = VecDeque::new();
        self.route_root_outputs(inner, outs, &mut queue);
        self.run(inner, queue);
        Ok(id)
    }

    /// Applies barrier timeouts at the current clock reading.
    pub fn tick(&self) {
        let mut g = self.inner.lock();
        let inner = &mut *g;
        let outs = inner.root.tick(self.clock.now());
        if !outs.is_empty() {
            let mut queue = VecDeque::new();
            self.route_root_outputs(inner, outs, &mut queue);
            self.run(inner, queue);
        }
    }

    pub fn next_deadline(&self) -> Option<Tick> {
        self.inner.lock().root.next_deadline()
    }

    pub fn with_root<R>(&self, f: impl FnOnce(&RootCore) -> R) -> R {
        f(&self.inner.lock().root)
    }

    pub fn root_session_count(&self) -> usize {
        self.inner.lock().root.session_count()
    }

    /// Connections ever opened to the root (sub-coordinators included).
    pub fn root_connects(&self) -> u64 {
        self.inner.lock().root_connects
    }

    /// Frames and bytes carried across all hops.
    pub fn traffic(&self) -> (u64, u64) {
        let g = self.inner.lock();
        (g.frames, g.bytes)
    }

    fn close(&self, id: SessionId) {
        let mut g = self.inner.lock();
        let inner = &mut *g;
        let Some(ep) = inner.endpoints.remove(&id) else { return };
        let mut queue = VecDeque::new();
        match ep.attach {
            Attach::Root => {
                let outs = inner.root.close_session(self.clock.now(), id);
                self.route_root_outputs(inner, outs, &mut queue);
            }
            Attach::Node(n) => {
                if let Some(sub) = inner.subs.get_mut(&n) {
                    let outs = sub.core.rank_closed(id);
                    let rs = sub.root_session;
                    for o in outs {
                        if let SubOut::Up(m) = o {
                            queue.push_back(Hop::ToRoot(rs, m));
                        }
                    }
                }
            }
        }
        self.run(inner, queue);
    }

    fn dispatch(&self, inner: &mut BusInner, hop: Hop) {
        self.run(inner, VecDeque::from([hop]));
    }

    fn run(&self, inner: &mut BusInner, mut queue: VecDeque<Hop>) {
        let mut delivered = false;
        while let Some(hop) = queue.pop_front() {
            match hop {
                Hop::FromEndpoint(ep, msg) => {
                    let msg = inner.carry(&msg);
                    match inner.endpoints.get(&ep).map(|e| e.attach) {
                        Some(Attach::Root) => queue.push_back(Hop::ToRoot(ep, msg)),
                        Some(Attach::Node(n)) => {
                            let Some(sub) = inner.subs.get_mut(&n) else { continue };
                            let rs = sub.root_session;
                            for o in sub.core.from_rank(ep, msg) {
                                match o {
                                    SubOut::Up(m) => queue.push_back(Hop::ToRoot(rs, m)),
                                    SubOut::Down(s, m) => delivered |= inner.deliver(s, m),
                                }
                            }
                        }
                        None => {}
                    }
                }
                Hop::ToRoot(session, msg) => {
                    let msg = if inner.sub_by_session.contains_key(&session) { inner.carry(&msg) } else { msg };
                    let outs = inner.root.handle(self.clock.now(), session, msg);
                    delivered |= self.route_root_outputs(inner, outs, &mut queue);
                }
                Hop::ToSub(node, msg) => {
                    let msg = inner.carry(&msg);
                    let Some(sub) = inner.subs.get_mut(&node) else { continue };
                    let rs = sub.root_session;
                    for o in sub.core.from_root(msg) {
                        match o {
                            SubOut::Up(m) => queue.push_back(Hop::ToRoot(rs, m)),
                            SubOut::Down(s, m) => delivered |= inner.deliver(s, m),
                        }
                    }
                }
            }
        }
        if delivered {
            self.cond.notify_all();
        }
    }

    fn route_root_outputs(&self, inner: &mut BusInner, outs: Vec<Outbound>, queue: &mut VecDeque<Hop>) -> bool {
        let mut delivered = false;
        for Outbound { to, msg } in outs {
            if let Some(node) = inner.sub_by_session.get(&to) {
                queue.push_back(Hop::ToSub(*node, msg));
            } else {
                let msg = inner.carry(&msg);
                delivered |= inner.deliver(to, msg);
            }
        }
        if delivered {
            self.cond.notify_all();
        }
        delivered
    }
}

impl BusInner {
    fn alloc(&mut self) -> SessionId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// One transmission: encode, count, decode.
    fn carry(&mut self, msg: &ControlMessage) -> ControlMessage {
        let bytes = msg.encode();
        self.frames += 1;
        self.bytes += bytes.len() as u64;
        ControlMessage::decode(&bytes).expect("encoded frame decodes")
    }

    fn deliver(&mut self, to: SessionId, msg: ControlMessage) -> bool {
        match self.endpoints.get_mut(&to) {
            Some(ep) if !ep.closed => {
                ep.inbox.push_back(msg);
                true
            }
            _ => false,
        }
    }
}

/// A rank's end of an in-process control connection. Dropping it closes
/// the connection, which the coordinator treats as the rank going away.
pub struct BusSession {
    bus: Arc<Bus>,
    id: SessionId,
    open: bool,
}

impl BusSession {
    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if self.open {
            self.open = false;
            self.bus.close(self.id);
        }
    }

    fn take(&self) -> Result<Option<ControlMessage>, CoordError> {
        let mut g = self.bus.inner.lock();
        take_from(&mut g, self.id)
    }
}

fn take_from(inner: &mut BusInner, id: SessionId) -> Result<Option<ControlMessage>, CoordError> {
    match inner.endpoints.get_mut(&id) {
        Some(ep) => match ep.inbox.pop_front() {
            Some(m) => Ok(Some(m)),
            None if ep.closed => Err(CoordError::Closed),
            None => Ok(None),
        },
        None => Err(CoordError::Closed),
    }
}

impl Session for BusSession {
    fn send(&mut self, msg: ControlMessage) -> Result<(), CoordError> {
        let mut g = self.bus.inner.lock();
        let inner = &mut *g;
        match inner.endpoints.get(&self.id) {
            Some(ep) if !ep.closed => {}
            _ => return Err(CoordError::Closed),
        }
        self.bus.dispatch(inner, Hop::FromEndpoint(self.id, msg));
        Ok(())
    }

    fn try_recv(&mut self) -> Result<Option<ControlMessage>, CoordError> {
        self.take()
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<ControlMessage>, CoordError> {
        let deadline = Instant::now() + timeout;
        let mut g = self.bus.inner.lock();
        loop {
            if let Some(m) = take_from(&mut g, self.id)? {
                return Ok(Some(m));
            }
            if self.bus.cond.wait_until(&mut g, deadline).timed_out() {
                return take_from(&mut g, self.id);
            }
        }
    }
}

impl Drop for BusSession {
    fn drop(&mut self) {
        self.shutdown();
    }
}
