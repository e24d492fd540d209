//! One rank: its application, its endpoints, and the checkpoint agent that
//! drives it through checkpoint and restart.
//!
//! Everything is a resumable step function so many ranks can share one
//! thread under the virtual clock: [`RankProcess::step`] either makes
//! progress or reports what it is waiting for.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, warn};

use super::comm::{Comm, CommState};
use super::drain::{DrainPolicy, DrainReport, DrainStep, Drainer};
use super::image::ImageError;
use super::memory::Memory;
use super::phase::{Phase, PhaseTracker};
use super::store::{load_eager, ImageStore, LazyImage, PendingImage};
use super::{CkptError, REPLY_TIMEOUT};
use crate::coordinator::{CoordClient, PhaseCounts, Phase as MsgPhase, Session};
use crate::fabric::{Fabric, Tick};
use crate::virt::{ResolvePolicy, UdVirt, VirtSnapshot};

pub const APP_REGION: &str = "app";
pub const COMM_REGION: &str = "comm";
pub const META_REGION: &str = "meta";

/// Application code running on a rank.
pub trait Application: Sized {
    fn save(&self) -> Vec<u8>;
    fn load(bytes: &[u8]) -> Result<Self, String>;
    /// Performs at most one unit of work.
    fn step(&mut self, comm: &mut Comm) -> Result<AppStep, CkptError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppStep {
    Progress,
    /// Waiting for a message, or until the given time.
    Blocked(Option<Tick>),
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Progress,
    Blocked(Option<Tick>),
    /// The application is done; the rank still answers checkpoint requests.
    Finished,
}

#[derive(Debug, Clone)]
pub struct ProcSpec {
    pub rank: u32,
    pub node: u32,
    pub ranks: u32,
    pub rc_peers: Vec<u32>,
    /// Peers reachable by datagram. Non-empty means the rank owns a UD endpoint.
    pub ud_peers: Vec<u32>,
    pub drain: DrainPolicy,
    pub store: ImageStore,
    pub resolve: ResolvePolicy,
    /// Run identity stored in every image and checked on restart.
    pub meta: Vec<u8>,
    /// Restart count; keeps barrier names of successive restarts apart.
    pub epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankEvent {
    Phase(Phase),
    BarrierEnter(String),
    BarrierRelease(String, bool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkptRecord {
    pub id: u32,
    pub drained: usize,
    pub windows: u32,
    pub timed_out: bool,
    pub committed: bool,
    pub image_bytes: u64,
    pub write_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartRecord {
    pub lazy: bool,
    pub image_bytes: u64,
    /// Time spent reading and verifying the image before restoring state.
    pub load_secs: f64,
    /// From the start of the restart until the application could run again.
    pub first_resume_secs: f64,
    pub restored_drained: usize,
}

enum Loaded {
    Eager(super::image::CheckpointImage),
    Lazy(Arc<LazyImage>),
}

enum CkptPc {
    WaitSuspend,
    Draining(Drainer),
    WaitWritten,
}

struct CkptRun {
    id: u32,
    started: Instant,
    pc: CkptPc,
    report: DrainReport,
    timed_out: bool,
    pending: Option<PendingImage>,
    write_secs: f64,
}

enum RestartPc {
    WaitRestored(Option<Loaded>),
    WaitRepublished,
}

struct RestartRun {
    started: Instant,
    lazy: bool,
    image_bytes: u64,
    load_secs: f64,
    restored_drained: usize,
    pc: RestartPc,
}

enum Mode {
    Launching,
    Running,
    Ckpt(CkptRun),
    Restart(RestartRun),
}

pub struct RankProcess<A: Application> {
    spec: ProcSpec,
    comm: Comm,
    app: Option<A>,
    mode: Mode,
    phases: PhaseTracker,
    events: Vec<RankEvent>,
    ckpts: Vec<CkptRecord>,
    restart: Option<RestartRecord>,
    finished: bool,
}

fn secs(since: Instant) -> f64 {
    since.elapsed().as_secs_f64()
}

impl<A: Application> RankProcess<A> {
    /// Registers, creates endpoints, publishes them and enters the launch barrier.
    pub fn launch(spec: ProcSpec, fabric: Arc<Fabric>, session: Box<dyn Session>, app: A) -> Result<Self, CkptError> {
        let mut client = CoordClient::new(spec.rank, spec.node, session);
        client.register(REPLY_TIMEOUT)?;
        let virt = UdVirt::new(spec.resolve);
        let comm = Comm::new(spec.rank, spec.node, spec.ranks, fabric, client, virt);
        let mut p = Self {
            comm,
            app: Some(app),
            mode: Mode::Launching,
            phases: PhaseTracker::starting_at(Phase::Running),
            events: vec![RankEvent::Phase(Phase::Running)],
            ckpts: Vec::new(),
            restart: None,
            finished: false,
            spec,
        };
        p.comm.open_rc(&p.spec.rc_peers.clone())?;
        if !p.spec.ud_peers.is_empty() {
            p.comm.open_ud()?;
        }
        p.barrier_enter("launch", true)?;
        Ok(p)
    }

    /// Loads this rank's image, registers, and enters the restore barrier
    /// with the outcome. A missing or corrupt image makes every rank abort.
    pub fn restart(
        spec: ProcSpec,
        fabric: Arc<Fabric>,
        session: Box<dyn Session>,
        image: PathBuf,
        lazy: bool,
    ) -> Result<Self, CkptError> {
        let started = Instant::now();
        let mut client = CoordClient::new(spec.rank, spec.node, session);
        client.set_phase(MsgPhase::Restart);
        let loaded = Self::load(&spec, &image, lazy);
        let load_secs = secs(started);
        client.register(REPLY_TIMEOUT)?;
        let virt = UdVirt::new(spec.resolve);
        let comm = Comm::new(spec.rank, spec.node, spec.ranks, fabric, client, virt);
        let (ok, image_bytes) = match &loaded {
            Ok((_, bytes)) => (true, *bytes),
            Err(e) => {
                warn!("rank {}: cannot restart from {}: {e}", spec.rank, image.display());
                (false, 0)
            }
        };
        let mut p = Self {
            comm,
            app: None,
            mode: Mode::Restart(RestartRun {
                started,
                lazy,
                image_bytes,
                load_secs,
                restored_drained: 0,
                pc: RestartPc::WaitRestored(loaded.ok().map(|l| l.0)),
            }),
            phases: PhaseTracker::starting_at(Phase::Restarting),
            events: vec![RankEvent::Phase(Phase::Restarting)],
            ckpts: Vec::new(),
            restart: None,
            finished: false,
            spec,
        };
        let name = format!("restored:{}", p.spec.epoch);
        p.barrier_enter(&name, ok)?;
        Ok(p)
    }

    fn load(spec: &ProcSpec, path: &std::path::Path, lazy: bool) -> Result<(Loaded, u64), CkptError> {
        let (loaded, rank, bytes) = if lazy {
            let img = LazyImage::open(path)?;
            let (rank, size) = (img.layout.rank, img.size);
            (Loaded::Lazy(Arc::new(img)), rank, size)
        } else {
            let img = load_eager(path)?;
            let size = std::fs::metadata(path)?.len();
            let rank = img.rank;
            (Loaded::Eager(img), rank, size)
        };
        if rank != spec.rank {
            return Err(CkptError::WrongRank { expected: spec.rank, found: rank });
        }
        let meta = match &loaded {
            Loaded::Eager(img) => img.regions.get(META_REGION).cloned(),
            Loaded::Lazy(img) => match img.layout.regions.iter().find(|r| r.tag == META_REGION) {
                Some(r) => Some(img.read(r.offset, r.len).map_err(ImageError::from)?),
                None => None,
            },
        };
        if meta.as_deref() != Some(spec.meta.as_slice()) {
            return Err(CkptError::MetaMismatch);
        }
        Ok((loaded, bytes))
    }

    pub fn rank(&self) -> u32 {
        self.spec.rank
    }

    pub fn spec(&self) -> &ProcSpec {
        &self.spec
    }

    pub fn phase(&self) -> Phase {
        self.phases.current()
    }

    pub fn phase_history(&self) -> &[Phase] {
        self.phases.history()
    }

    pub fn events(&self) -> &[RankEvent] {
        &self.events
    }

    pub fn checkpoints(&self) -> &[CkptRecord] {
        &self.ckpts
    }

    pub fn restart_record(&self) -> Option<&RestartRecord> {
        self.restart.as_ref()
    }

    pub fn comm(&self) -> &Comm {
        &self.comm
    }

    pub fn comm_mut(&mut self) -> &mut Comm {
        &mut self.comm
    }

    pub fn app(&self) -> Option<&A> {
        self.app.as_ref()
    }

    pub fn is_running(&self) -> bool {
        matches!(self.mode, Mode::Running)
    }

    pub fn is_finished(&self) -> bool {
        self.finished && self.is_running()
    }

    pub fn message_counts(&self) -> PhaseCounts {
        self.comm.client.counts()
    }

    pub fn memory(&mut self) -> &mut Memory {
        &mut self.comm.memory
    }

    fn enter(&mut self, phase: Phase) -> Result<(), CkptError> {
        self.phases.enter(phase)?;
        self.events.push(RankEvent::Phase(phase));
        Ok(())
    }

    fn barrier_enter(&mut self, name: &str, ok: bool) -> Result<(), CkptError> {
        self.events.push(RankEvent::BarrierEnter(name.to_string()));
        self.comm.client.barrier_enter(name, ok)?;
        Ok(())
    }

    fn barrier_poll(&mut self, name: &str) -> Result<Option<bool>, CkptError> {
        let r = self.comm.client.poll_barrier(name)?;
        if let Some(ok) = r {
            self.events.push(RankEvent::BarrierRelease(name.to_string(), ok));
        }
        Ok(r)
    }

    pub fn step(&mut self) -> Result<Step, CkptError> {
        match &self.mode {
            Mode::Launching => self.step_launch(),
            Mode::Running => self.step_running(),
            Mode::Ckpt(_) => self.step_ckpt(),
            Mode::Restart(_) => self.step_restart(),
        }
    }

    fn step_launch(&mut self) -> Result<Step, CkptError> {
        match self.barrier_poll("launch")? {
            None => Ok(Step::Blocked(None)),
            Some(false) => Err(CkptError::BarrierAborted("launch".into())),
            Some(true) => {
                self.comm.connect_rc()?;
                let peers = self.spec.ud_peers.clone();
                self.comm.connect_ud(&peers)?;
                self.comm.client.set_phase(MsgPhase::Steady);
                self.mode = Mode::Running;
                Ok(Step::Progress)
            }
        }
    }

    fn step_running(&mut self) -> Result<Step, CkptError> {
        if let Some(id) = self.comm.client.poll_ckpt_request()? {
            self.begin_checkpoint(id)?;
            return Ok(Step::Progress);
        }
        if self.finished {
            return Ok(Step::Finished);
        }
        let app = self.app.as_mut().expect("running rank has an application");
        Ok(match app.step(&mut self.comm)? {
            AppStep::Progress => Step::Progress,
            AppStep::Blocked(t) => Step::Blocked(t),
            AppStep::Finished => {
                self.finished = true;
                Step::Finished
            }
        })
    }

    fn begin_checkpoint(&mut self, id: u32) -> Result<(), CkptError> {
        debug!("rank {}: checkpoint {id} requested", self.spec.rank);
        self.enter(Phase::Suspended)?;
        self.comm.client.set_phase(MsgPhase::Checkpoint);
        self.barrier_enter(&format!("suspend:{id}"), true)?;
        self.mode = Mode::Ckpt(CkptRun {
            id,
            started: Instant::now(),
            pc: CkptPc::WaitSuspend,
            report: DrainReport { drained: 0, windows: 0 },
            timed_out: false,
            pending: None,
            write_secs: 0.0,
        });
        Ok(())
    }

    fn step_ckpt(&mut self) -> Result<Step, CkptError> {
        let Mode::Ckpt(mut run) = std::mem::replace(&mut self.mode, Mode::Running) else { unreachable!() };
        match self.advance_ckpt(&mut run) {
            Ok((step, true)) => Ok(step),
            other => {
                self.mode = Mode::Ckpt(run);
                other.map(|(s, _)| s)
            }
        }
    }

    /// Returns the step and whether the checkpoint is over.
    fn advance_ckpt(&mut self, run: &mut CkptRun) -> Result<(Step, bool), CkptError> {
        match &mut run.pc {
            CkptPc::WaitSuspend => {
                let name = format!("suspend:{}", run.id);
                match self.barrier_poll(&name)? {
                    None => Ok((Step::Blocked(None), false)),
                    Some(ok) => {
                        self.enter(Phase::Draining)?;
                        if ok {
                            run.pc = CkptPc::Draining(Drainer::new(self.comm.now(), self.spec.drain));
                            Ok((Step::Progress, false))
                        } else {
                            self.write_and_enter(run, false).map(|s| (s, false))
                        }
                    }
                }
            }
            CkptPc::Draining(drainer) => {
                let now = self.comm.now();
                let comm = &mut self.comm;
                match drainer.step(now, |limit| comm.drain_poll(limit)) {
                    DrainStep::Wait(at) => Ok((Step::Blocked(Some(at)), false)),
                    DrainStep::Done(r) => {
                        run.report = r;
                        self.write_and_enter(run, true).map(|s| (s, false))
                    }
                    DrainStep::TimedOut(r) => {
                        warn!("rank {}: drain timed out after {} windows", self.spec.rank, r.windows);
                        run.report = r;
                        run.timed_out = true;
                        self.write_and_enter(run, false).map(|s| (s, false))
                    }
                }
            }
            CkptPc::WaitWritten => {
                let name = format!("written:{}", run.id);
                match self.barrier_poll(&name)? {
                    None => Ok((Step::Blocked(None), false)),
                    Some(ok) => {
                        let mut committed = false;
                        let mut image_bytes = 0;
                        if let Some(p) = run.pending.take() {
                            image_bytes = p.bytes;
                            if ok {
                                self.spec.store.commit(&p)?;
                                committed = true;
                            } else {
                                self.spec.store.discard(&p)?;
                            }
                        }
                        self.enter(Phase::Resuming)?;
                        self.comm.client.phase_ack(run.id, Phase::Resuming.code())?;
                        self.enter(Phase::Running)?;
                        self.comm.client.set_phase(MsgPhase::Steady);
                        self.ckpts.push(CkptRecord {
                            id: run.id,
                            drained: run.report.drained,
                            windows: run.report.windows,
                            timed_out: run.timed_out,
                            committed,
                            image_bytes,
                            write_secs: run.write_secs,
                            total_secs: secs(run.started),
                        });
                        Ok((Step::Progress, true))
                    }
                }
            }
        }
    }

    /// Enters WRITING, writes the image if `write`, and enters the written
    /// barrier with the outcome.
    fn write_and_enter(&mut self, run: &mut CkptRun, write: bool) -> Result<Step, CkptError> {
        self.enter(Phase::Writing)?;
        let mut ok = write;
        if write {
            let t = Instant::now();
            match self.write_image() {
                Ok(p) => run.pending = Some(p),
                Err(e) => {
                    warn!("rank {}: image write failed: {e}", self.spec.rank);
                    ok = false;
                }
            }
            run.write_secs = secs(t);
        }
        self.barrier_enter(&format!("written:{}", run.id), ok)?;
        run.pc = CkptPc::WaitWritten;
        Ok(Step::Progress)
    }

    fn write_image(&mut self) -> Result<PendingImage, CkptError> {
        let app = self.app.as_ref().expect("checkpointing rank has an application").save();
        let comm_state = serde_json::to_vec(&self.comm.state()).expect("comm state serializes");
        let virt: VirtSnapshot = self.comm.virt.snapshot();
        let drained = self.comm.drained();
        let generation = self.comm.fabric().generation();
        let mem = &mut self.comm.memory;
        mem.insert(APP_REGION, app);
        mem.insert(COMM_REGION, comm_state);
        mem.insert(META_REGION, self.spec.meta.clone());
        let regions = mem.snapshot()?;
        Ok(self.spec.store.write_pending(self.spec.rank, generation, regions.into_iter(), &virt, &drained)?)
    }

    fn step_restart(&mut self) -> Result<Step, CkptError> {
        let Mode::Restart(mut run) = std::mem::replace(&mut self.mode, Mode::Running) else { unreachable!() };
        match self.advance_restart(&mut run) {
            Ok((step, true)) => Ok(step),
            other => {
                self.mode = Mode::Restart(run);
                other.map(|(s, _)| s)
            }
        }
    }

    fn advance_restart(&mut self, run: &mut RestartRun) -> Result<(Step, bool), CkptError> {
        match &mut run.pc {
            RestartPc::WaitRestored(loaded) => {
                let name = format!("restored:{}", self.spec.epoch);
                match self.barrier_poll(&name)? {
                    None => Ok((Step::Blocked(None), false)),
                    Some(false) => Err(CkptError::RestartAborted(name)),
                    Some(true) => {
                        let loaded = loaded.take().expect("released ok only if every image loaded");
                        self.restore(loaded, run)?;
                        run.pc = RestartPc::WaitRepublished;
                        Ok((Step::Progress, false))
                    }
                }
            }
            RestartPc::WaitRepublished => {
                let name = format!("republished:{}", self.spec.epoch);
                match self.barrier_poll(&name)? {
                    None => Ok((Step::Blocked(None), false)),
                    Some(false) => Err(CkptError::RestartAborted(name)),
                    Some(true) => {
                        self.comm.connect_rc()?;
                        self.enter(Phase::Resuming)?;
                        self.enter(Phase::Running)?;
                        self.comm.client.set_phase(MsgPhase::Steady);
                        self.restart = Some(RestartRecord {
                            lazy: run.lazy,
                            image_bytes: run.image_bytes,
                            load_secs: run.load_secs,
                            first_resume_secs: secs(run.started),
                            restored_drained: run.restored_drained,
                        });
                        Ok((Step::Progress, true))
                    }
                }
            }
        }
    }

    fn restore(&mut self, loaded: Loaded, run: &mut RestartRun) -> Result<(), CkptError> {
        let (memory, virt, drained) = match loaded {
            Loaded::Eager(img) => (Memory::from_regions(img.regions), img.virt, img.drained),
            Loaded::Lazy(img) => {
                let (virt, drained) = (img.virt.clone(), img.drained.clone());
                (Memory::mapped(img), virt, drained)
            }
        };
        self.comm.memory = memory;
        let comm_bytes = self.comm.memory.remove(COMM_REGION).ok_or(CkptError::MissingRegion(COMM_REGION))?;
        let app_bytes = self.comm.memory.remove(APP_REGION).ok_or(CkptError::MissingRegion(APP_REGION))?;
        self.comm.memory.remove(META_REGION);
        let state: CommState = serde_json::from_slice(&comm_bytes).map_err(|e| CkptError::App(e.to_string()))?;
        self.app = Some(A::load(&app_bytes).map_err(CkptError::App)?);
        self.comm.apply_state(state);
        self.comm.virt = UdVirt::restore(virt, self.spec.resolve);
        run.restored_drained = drained.len();
        self.comm.set_drained(drained);
        self.comm.refresh_ud()?;
        let peers = self.comm.rc_peers();
        self.comm.open_rc(&peers)?;
        let name = format!("republished:{}", self.spec.epoch);
        self.barrier_enter(&name, true)
    }
}
