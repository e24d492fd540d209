//! Per-rank checkpointing: phase machine, in-flight drain, image format and
//! storage, lazy memory restore, and the rank process that ties them to the
//! fabric and coordinator.

use std::io;
use std::time::Duration;

use thiserror::Error;

use crate::coordinator::CoordError;
use crate::fabric::FabricError;
use crate::virt::VirtError;

pub mod comm;
pub mod drain;
pub mod image;
pub mod memory;
pub mod phase;
pub mod process;
pub mod store;

pub use comm::{Comm, CommCounters};
pub use drain::{DrainPolicy, DrainReport, DrainStep, Drainer};
pub use image::{Channel, CheckpointImage, DrainedMessage, ImageError};
pub use memory::{Memory, MemoryStats};
pub use phase::{is_legal_sequence, Phase, PhaseTracker};
pub use process::{AppStep, Application, CkptRecord, ProcSpec, RankEvent, RankProcess, RestartRecord, Step};
pub use store::{ImageStore, LazyImage, PendingImage, DIR_ENV};

pub(crate) const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("illegal phase transition {from:?} -> {to:?}")]
    IllegalTransition { from: Phase, to: Phase },
    #[error("barrier `{0}` aborted")]
    BarrierAborted(String),
    #[error("restart aborted at barrier `{0}`")]
    RestartAborted(String),
    #[error("peer publication `{0}` missing or stale")]
    MissingPeer(String),
    #[error("no channel to rank {0}")]
    NoChannel(u32),
    #[error("image belongs to rank {found}, expected {expected}")]
    WrongRank { expected: u32, found: u32 },
    #[error("image was written by a different run")]
    MetaMismatch,
    #[error("image has no `{0}` region")]
    MissingRegion(&'static str),
    #[error("application state: {0}")]
    App(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Virt(#[from] VirtError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
