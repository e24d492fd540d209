//! Out-of-band control plane: framed messages, a publish/query store,
//! barriers, checkpoint rounds, and optional per-node sub-coordinators.
//!
//! [`RootCore`] and [`SubCore`] are pure state machines. [`Bus`] runs them
//! in-process with synchronous dispatch; [`tcp`] runs them over sockets.

use std::io;
use std::time::Duration;

use thiserror::Error;

use crate::fabric::{ClockMode, Tick};

pub mod backoff;
pub mod bus;
pub mod client;
pub mod kv;
pub mod root;
pub mod sub;
pub mod tcp;
pub mod wire;

pub use backoff::{BackoffPolicy, ConnectGate, GateOutcome, Overload};
pub use bus::{Attach, Bus, BusSession};
pub use client::{CoordClient, Phase, PhaseCounts};
pub use kv::{KvEntry, KvStore};
pub use root::{BarrierRecord, Outbound, RootCore};
pub use sub::{SubCore, SubOut};
pub use tcp::{RootStats, TcpRoot, TcpSession, TcpSub};
pub use wire::{Body, ControlMessage, MsgType, ReplyStatus, Role, WireError, ROOT_ID};

pub type SessionId = u64;

/// `dest` of the REGISTER_ACK a sub-coordinator receives for itself.
pub const SUB_SELF: u32 = u32::MAX - 1;

/// Environment variable holding `host:port` of the root coordinator.
pub const COORD_ENV: &str = "CKPTF_COORD";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Flat,
    Tree,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordConfig {
    /// Ticks a barrier may stay open before it is released with failure.
    pub barrier_timeout: Tick,
    /// Cap on concurrent root sessions, modelling a per-process socket limit.
    pub max_sessions: Option<usize>,
}

impl Default for CoordConfig {
    fn default() -> Self {
        Self::for_clock(ClockMode::Virtual)
    }
}

impl CoordConfig {
    pub fn for_clock(mode: ClockMode) -> Self {
        let barrier_timeout = match mode {
            ClockMode::Virtual => 1_000_000,
            ClockMode::Wall => 30_000,
        };
        Self { barrier_timeout, max_sessions: None }
    }
}

#[derive(Debug, Error)]
pub enum CoordError {
    #[error("coordinator connection closed")]
    Closed,
    #[error("registration rejected: {0}")]
    Rejected(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("checkpoint {0} already in progress")]
    CheckpointInProgress(u32),
    #[error("only {registered} of {expected} participants registered")]
    NotAllRegistered { registered: usize, expected: usize },
    #[error("root session limit of {0} reached")]
    SessionLimit(usize),
    #[error("no sub-coordinator running on node {0}")]
    UnknownSub(u32),
    #[error("barrier `{0}` failed")]
    BarrierFailed(String),
    #[error("unexpected reply: {0}")]
    Unexpected(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One endpoint's view of a control-plane connection.
pub trait Session: Send {
    fn send(&mut self, msg: ControlMessage) -> Result<(), CoordError>;
    fn try_recv(&mut self) -> Result<Option<ControlMessage>, CoordError>;
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<ControlMessage>, CoordError>;
}
