//! Socket transport for the coordinator.
//!
//! Each accepted connection gets a reader thread that decodes frames and
//! forwards them to a single event-loop thread, which owns the state machine
//! and writes every reply. Small control frames are written immediately with
//! Nagle coalescing disabled.

use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use super::root::{Outbound, RootCore};
use super::sub::{SubCore, SubOut};
use super::wire::ControlMessage;
use super::{BackoffPolicy, CoordConfig, CoordError, Session, SessionId};
use crate::fabric::Clock;

const TICK_INTERVAL: Duration = Duration::from_millis(50);

fn configure(stream: &TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)
}

/// Spawns a thread that forwards decoded frames from `stream` as events.
fn spawn_reader<E: Send + 'static>(
    stream: TcpStream,
    tx: Sender<E>,
    frame: impl Fn(ControlMessage) -> E + Send + 'static,
    closed: E,
) -> io::Result<JoinHandle<()>> {
    thread::Builder::new().name("ckptf-reader".into()).spawn(move || {
        let mut reader = BufReader::new(stream);
        loop {
            match ControlMessage::read_from(&mut reader) {
                Ok(Some(msg)) => {
                    if tx.send(frame(msg)).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    debug!("reader stopped: {e}");
                    break;
                }
            }
        }
        let _ = tx.send(closed);
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RootStats {
    pub sessions: usize,
    pub peak_sessions: usize,
    pub registered: usize,
    pub completed_checkpoints: u32,
    pub aborted_checkpoints: u32,
    pub frames_in: u64,
    /// Connections ever accepted.
    pub connects: u64,
}

enum RootEvent {
    Open(SessionId, TcpStream),
    Frame(SessionId, ControlMessage),
    Closed(SessionId),
    Checkpoint(Sender<Result<u32, CoordError>>),
    Stats(Sender<RootStats>),
    Stop,
}

/// Root coordinator listening on a TCP port.
pub struct TcpRoot {
    addr: SocketAddr,
    tx: Sender<RootEvent>,
    event_loop: Option<JoinHandle<()>>,
}

impl TcpRoot {
    pub fn start(bind: impl ToSocketAddrs, expected: u32, config: CoordConfig, clock: Arc<Clock>) -> Result<Self, CoordError> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let accept_tx = tx.clone();
        thread::Builder::new().name("ckptf-accept".into()).spawn(move || {
            let mut next: SessionId = 1;
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                if configure(&stream).is_err() {
                    continue;
                }
                let id = next;
                next += 1;
                let Ok(read_half) = stream.try_clone() else { continue };
                if accept_tx.send(RootEvent::Open(id, stream)).is_err() {
                    return;
                }
                let _ = spawn_reader(read_half, accept_tx.clone(), move |m| RootEvent::Frame(id, m), RootEvent::Closed(id));
            }
        })?;
        let core = RootCore::new(expected, config);
        let event_loop = thread::Builder::new()
            .name("ckptf-root".into())
            .spawn(move || root_loop(core, rx, clock))?;
        Ok(Self { addr, tx, event_loop: Some(event_loop) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn request_checkpoint(&self) -> Result<u32, CoordError> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(RootEvent::Checkpoint(tx)).map_err(|_| CoordError::Closed)?;
        rx.recv().map_err(|_| CoordError::Closed)?
    }

    pub fn stats(&self) -> Result<RootStats, CoordError> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(RootEvent::Stats(tx)).map_err(|_| CoordError::Closed)?;
        rx.recv().map_err(|_| CoordError::Closed)
    }
}

impl Drop for TcpRoot {
    fn drop(&mut self) {
        let _ = self.tx.send(RootEvent::Stop);
        if let Some(h) = self.event_loop.take() {
            let _ = h.join();
        }
        // Unblock the accept thread so it can observe the closed channel.
        let _ = TcpStream::connect(self.addr);
    }
}

fn write_all(writers: &mut HashMap<SessionId, TcpStream>, outs: Vec<Outbound>) {
    for Outbound { to, msg } in outs {
        if let Some(w) = writers.get_mut(&to) {
            if let Err(e) = msg.write_to(w) {
                warn!("write to session {to} failed: {e}");
            }
        }
    }
}

fn root_loop(mut core: RootCore, rx: Receiver<RootEvent>, clock: Arc<Clock>) {
    let mut writers: HashMap<SessionId, TcpStream> = HashMap::new();
    let mut connects = 0;
    loop {
        let event = match rx.recv_timeout(TICK_INTERVAL) {
            Ok(e) => e,
            Err(RecvTimeoutError::Timeout) => {
                let outs = core.tick(clock.now());
                write_all(&mut writers, outs);
                continue;
            }
            Err(RecvTimeoutError::Disconnected) => break,
        };
        match event {
            RootEvent::Open(id, stream) => match core.open_session(id) {
                Ok(()) => {
                    connects += 1;
                    writers.insert(id, stream);
                }
                Err(e) => {
                    warn!("refusing session {id}: {e}");
                    let _ = stream.shutdown(Shutdown::Both);
                }
            },
            RootEvent::Frame(id, msg) => {
                let outs = core.handle(clock.now(), id, msg);
                write_all(&mut writers, outs);
            }
            RootEvent::Closed(id) => {
                writers.remove(&id);
                let outs = core.close_session(clock.now(), id);
                write_all(&mut writers, outs);
            }
            RootEvent::Checkpoint(reply) => {
                let result = core.request_checkpoint().map(|(id, outs)| {
                    write_all(&mut writers, outs);
                    id
                });
                let _ = reply.send(result);
            }
            RootEvent::Stats(reply) => {
                let _ = reply.send(RootStats {
                    sessions: core.session_count(),
                    peak_sessions: core.peak_sessions(),
                    registered: core.registered(),
                    completed_checkpoints: core.completed_checkpoints(),
                    aborted_checkpoints: core.aborted_checkpoints(),
                    frames_in: core.total_frames_in(),
                    connects,
                });
            }
            RootEvent::Stop => break,
        }
        let outs = core.tick(clock.now());
        write_all(&mut writers, outs);
    }
    for w in writers.values() {
        let _ = w.shutdown(Shutdown::Both);
    }
}

enum SubEvent {
    Open(SessionId, TcpStream),
    FromRank(SessionId, ControlMessage),
    RankClosed(SessionId),
    FromRoot(ControlMessage),
    RootClosed,
    Stop,
}

/// Per-node sub-coordinator: one session to the root, a listener for local ranks.
pub struct TcpSub {
    addr: SocketAddr,
    tx: Sender<SubEvent>,
    event_loop: Option<JoinHandle<()>>,
}

/// Connects to `addr`, retrying refused attempts per `policy`.
pub fn connect_with_retry(addr: SocketAddr, policy: &BackoffPolicy) -> Result<TcpStream, CoordError> {
    let mut attempt = 0;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => {
                configure(&s)?;
                return Ok(s);
            }
            Err(e) if attempt < policy.max_retries => {
                attempt += 1;
                debug!("connect to {addr} failed ({e}), retry {attempt}");
                thread::sleep(Duration::from_millis(policy.retry_delay(attempt)));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

impl TcpSub {
    pub fn start(node: u32, expected_local: u32, root: SocketAddr, policy: &BackoffPolicy) -> Result<Self, CoordError> {
        let mut up = connect_with_retry(root, policy)?;
        let core = SubCore::new(node, expected_local);
        core.register_message().write_to(&mut up)?;
        let listener = TcpListener::bind(("127.0.0.1", 0))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        spawn_reader(up.try_clone()?, tx.clone(), SubEvent::FromRoot, SubEvent::RootClosed)?;
        let accept_tx = tx.clone();
        thread::Builder::new().name("ckptf-sub-accept".into()).spawn(move || {
            let mut next: SessionId = 1;
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                if configure(&stream).is_err() {
                    continue;
                }
                let id = next;
                next += 1;
                let Ok(read_half) = stream.try_clone() else { continue };
                if accept_tx.send(SubEvent::Open(id, stream)).is_err() {
                    return;
                }
                let _ = spawn_reader(read_half, accept_tx.clone(), move |m| SubEvent::FromRank(id, m), SubEvent::RankClosed(id));
            }
        })?;
        let event_loop = thread::Builder::new()
            .name(format!("ckptf-sub-{node}"))
            .spawn(move || sub_loop(core, up, rx))?;
        Ok(Self { addr, tx, event_loop: Some(event_loop) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for TcpSub {
    fn drop(&mut self) {
        let _ = self.tx.send(SubEvent::Stop);
        if let Some(h) = self.event_loop.take() {
            let _ = h.join();
        }
        let _ = TcpStream::connect(self.addr);
    }
}

fn sub_loop(mut core: SubCore, mut up: TcpStream, rx: Receiver<SubEvent>) {
    let mut ranks: HashMap<SessionId, TcpStream> = HashMap::new();
    while let Ok(event) = rx.recv() {
        let outs = match event {
            SubEvent::Open(id, stream) => {
                ranks.insert(id, stream);
                Vec::new()
            }
            SubEvent::FromRank(id, msg) => core.from_rank(id, msg),
            SubEvent::RankClosed(id) => {
                ranks.remove(&id);
                core.rank_closed(id)
            }
            SubEvent::FromRoot(msg) => core.from_root(msg),
            SubEvent::RootClosed | SubEvent::Stop => break,
        };
        for o in outs {
            let result = match o {
                SubOut::Up(m) => m.write_to(&mut up),
                SubOut::Down(s, m) => match ranks.get_mut(&s) {
                    Some(w) => m.write_to(w),
                    None => Ok(()),
                },
            };
            if let Err(e) = result {
                warn!("node {}: write failed: {e}", core.node());
            }
        }
    }
    let _ = up.shutdown(Shutdown::Both);
    for w in ranks.values() {
        let _ = w.shutdown(Shutdown::Both);
    }
}

/// A rank's socket connection to the root or its node's sub-coordinator.
pub struct TcpSession {
    stream: TcpStream,
    rx: Receiver<Option<ControlMessage>>,
    closed: bool,
}

impl TcpSession {
    pub fn connect(addr: SocketAddr, policy: &BackoffPolicy) -> Result<Self, CoordError> {
        let stream = connect_with_retry(addr, policy)?;
        let (tx, rx) = mpsc::channel();
        spawn_reader(stream.try_clone()?, tx, Some, None)?;
        Ok(Self { stream, rx, closed: false })
    }

    fn got(&mut self, m: Option<ControlMessage>) -> Result<Option<ControlMessage>, CoordError> {
        match m {
            Some(m) => Ok(Some(m)),
            None => {
                self.closed = true;
                Err(CoordError::Closed)
            }
        }
    }
}

impl Session for TcpSession {
    fn send(&mut self, msg: ControlMessage) -> Result<(), CoordError> {
        if self.closed {
            return Err(CoordError::Closed);
        }
        msg.write_to(&mut self.stream).map_err(CoordError::from)
    }

    fn try_recv(&mut self) -> Result<Option<ControlMessage>, CoordError> {
        match self.rx.try_recv() {
            Ok(m) => self.got(m),
            Err(mpsc::TryRecvError::Empty) if !self.closed => Ok(None),
            Err(_) => Err(CoordError::Closed),
        }
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<ControlMessage>, CoordError> {
        match self.rx.recv_timeout(timeout) {
            Ok(m) => self.got(m),
            Err(RecvTimeoutError::Timeout) if !self.closed => Ok(None),
            Err(_) => Err(CoordError::Closed),
        }
    }
}

impl Drop for TcpSession {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}
