//! Launches a workload over simulated nodes, injects checkpoints, kills and
//! restarts, and reports timings and correctness.
//!
//! Under the virtual clock every rank runs on the calling thread and the
//! run is fully deterministic. Under the wall clock every rank runs on its
//! own thread and the control plane uses TCP on the loopback interface.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ckpt::{
    is_legal_sequence, CkptError, CkptRecord, CommCounters, DrainPolicy, ImageStore, MemoryStats, Phase,
    ProcSpec, RankEvent, RankProcess, RestartRecord,
};
use crate::coordinator::{BackoffPolicy, BarrierRecord, ConnectGate, CoordError, Overload, PhaseCounts, Topology};
use crate::fabric::{ClockMode, Fabric, FabricConfig, FabricError, FabricMetrics, ReassignMode, Tick, TraceEvent};
use crate::virt::{ResolvePolicy, VirtStats};

mod report;
mod virtual_run;
mod wall_run;
pub mod workload;

pub use report::{CheckpointSummary, RankControl, RestartSummary, RunReport};
pub use workload::{HeapSpec, WorkloadApp, WorkloadKind, WorkloadSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("launch failed: {0}")]
    Launch(String),
    #[error("no rank can make progress at t={now}: {detail}")]
    Deadlock { now: Tick, detail: String },
    #[error("run exceeded its time limit of {0:?}")]
    TimedOut(std::time::Duration),
    #[error("no complete checkpoint for {0} ranks")]
    NoImage(u32),
    #[error("rank thread panicked")]
    Panicked,
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// When an injected checkpoint is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    /// Once rank 0 reaches the start of this iteration.
    Iteration(u32),
    /// Once the ranks have taken this many application steps in total,
    /// which usually falls in the middle of an iteration.
    Step(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    pub trigger: Trigger,
    /// Kill every rank once the checkpoint completes and restart from images.
    pub kill_and_restart: bool,
}

/// A connection-limited endpoint standing in for the root (and, in tree
/// mode, each sub-coordinator) during launch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateSpec {
    pub limit: usize,
    pub handshake: Tick,
    pub overload: Overload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Start {
    Fresh,
    /// Restart every rank from the latest complete checkpoint in the directory.
    FromImages,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub workload: WorkloadSpec,
    pub topology: Topology,
    /// `clock_mode` selects the driver.
    pub fabric: FabricConfig,
    pub drain: DrainPolicy,
    pub resolve: ResolvePolicy,
    pub ckpt_dir: PathBuf,
    pub injections: Vec<Injection>,
    pub lazy_restart: bool,
    pub reassign: ReassignMode,
    pub backoff: BackoffPolicy,
    pub gate: Option<GateSpec>,
    /// Wall-clock runs only.
    pub time_limit: std::time::Duration,
}

impl RunConfig {
    pub fn new(workload: WorkloadSpec, ckpt_dir: impl Into<PathBuf>) -> Self {
        let fabric = FabricConfig { rng_seed: workload.seed, ..FabricConfig::default() };
        Self {
            workload,
            topology: Topology::Flat,
            fabric,
            drain: DrainPolicy::default(),
            resolve: ResolvePolicy::GenerationCached,
            ckpt_dir: ckpt_dir.into(),
            injections: Vec::new(),
            lazy_restart: false,
            reassign: ReassignMode::Random,
            backoff: BackoffPolicy::storm(),
            gate: None,
            time_limit: std::time::Duration::from_secs(120),
        }
    }

    /// Switches to the wall clock with the matching drain window.
    pub fn wall(mut self) -> Self {
        self.fabric.clock_mode = ClockMode::Wall;
        self.drain = DrainPolicy::for_clock(ClockMode::Wall);
        self
    }

    pub fn clock(&self) -> ClockMode {
        self.fabric.clock_mode
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.workload.validate(self.fabric.mtu).map_err(HarnessError::Invalid)?;
        self.drain.validate().map_err(HarnessError::Invalid)?;
        self.fabric.validate()?;
        Ok(())
    }

    /// Stored in every image; a restart under a different spec is refused.
    pub fn meta(&self) -> Vec<u8> {
        serde_json::to_vec(&self.workload).expect("workload spec serializes")
    }

    fn store(&self) -> ImageStore {
        ImageStore::new(&self.ckpt_dir)
    }

    fn proc_spec(&self, rank: u32, epoch: u32) -> ProcSpec {
        let w = &self.workload;
        ProcSpec {
            rank,
            node: w.node_of(rank),
            ranks: w.ranks,
            rc_peers: w.rc_peers(rank),
            ud_peers: w.ud_peers(rank),
            drain: self.drain,
            store: self.store(),
            resolve: self.resolve,
            meta: self.meta(),
            epoch,
        }
    }

    fn new_fabric(&self) -> Result<std::sync::Arc<Fabric>, HarnessError> {
        let fabric = Fabric::new(self.fabric.clone(), self.workload.nodes)?;
        for node in 0..self.workload.nodes {
            fabric.create_hca(node)?;
        }
        Ok(std::sync::Arc::new(fabric))
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub ranks: Vec<RankSummary>,
    pub trace: Vec<TraceEvent>,
    pub barrier_log: Vec<BarrierRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSummary {
    pub rank: u32,
    pub node: u32,
    pub iteration: u32,
    pub value: u64,
    pub digest: u64,
    pub counts: PhaseCounts,
    pub comm: CommCounters,
    pub virt: VirtStats,
    /// Events of every incarnation, in order.
    pub events: Vec<RankEvent>,
    /// Phase history of each incarnation.
    pub phase_histories: Vec<Vec<Phase>>,
    /// Memory of the last incarnation, measured before the final digest.
    pub memory: MemoryStats,
}

pub fn run(config: &RunConfig) -> Result<RunOutcome, HarnessError> {
    run_from(config, Start::Fresh)
}

pub fn run_from(config: &RunConfig, start: Start) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    match config.clock() {
        ClockMode::Virtual => virtual_run::run(config, start),
        ClockMode::Wall => wall_run::run(config, start),
    }
}

/// Result of replaying the launch connection attempts against the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LaunchModel {
    pub ticks: Tick,
    pub peak_root_attempts: usize,
    pub refusals: u64,
}

/// Replays the launch connection schedule. In flat mode every rank connects
/// to the root; in tree mode one sub-coordinator per node connects to the
/// root and each node's ranks connect to their sub-coordinator.
pub fn model_launch(config: &RunConfig) -> Result<LaunchModel, HarnessError> {
    let w = &config.workload;
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed ^ 0x6c61_756e_6368);
    let root_attempts = match config.topology {
        Topology::Flat => w.ranks,
        Topology::Tree => w.nodes,
    };
    let mut model = LaunchModel::default();
    let mut groups = vec![("root".to_string(), root_attempts)];
    if config.topology == Topology::Tree {
        groups.extend((0..w.nodes).map(|n| (format!("node {n}"), w.ranks_per_node())));
    }
    for (i, (name, count)) in groups.into_iter().enumerate() {
        let starts = config.backoff.schedule(count, &mut rng);
        let (finish, peak) = match config.gate {
            Some(g) => {
                let gate = ConnectGate::new(g.limit, g.handshake, g.overload);
                let out = gate.simulate(&starts, &config.backoff);
                if !out.succeeded() {
                    return Err(HarnessError::Launch(format!(
                        "{name}: {} of {count} connections killed, {} gave up after retries, peak {} concurrent attempts against a limit of {}",
                        out.killed.len(),
                        out.exhausted.len(),
                        out.peak,
                        g.limit
                    )));
                }
                model.refusals += out.refusals;
                (out.finish(), out.peak)
            }
            None => (starts.iter().copied().max().unwrap_or(0), count as usize),
        };
        if i == 0 {
            model.peak_root_attempts = peak;
        }
        model.ticks = model.ticks.max(finish);
    }
    Ok(model)
}

/// What survives of a rank across kills: counters and records of every
/// incarnation.
#[derive(Debug, Clone, Default)]
struct RankLedger {
    counts: PhaseCounts,
    comm: CommCounters,
    virt: VirtStats,
    events: Vec<RankEvent>,
    histories: Vec<Vec<Phase>>,
    ckpts: Vec<CkptRecord>,
    restarts: Vec<(u32, RestartRecord)>,
}

impl RankLedger {
    fn absorb(&mut self, p: &RankProcess<WorkloadApp>) {
        self.counts.add(&p.message_counts());
        let c = p.comm().counters();
        self.comm.rc_sent += c.rc_sent;
        self.comm.rc_received += c.rc_received;
        self.comm.ud_sent += c.ud_sent;
        self.comm.ud_received += c.ud_received;
        self.comm.redelivered += c.redelivered;
        let v = p.comm().virt().stats();
        self.virt.queries += v.queries;
        self.virt.resolves += v.resolves;
        self.virt.sends += v.sends;
        self.virt.received += v.received;
        self.virt.misdelivered += v.misdelivered;
        self.virt.malformed += v.malformed;
        self.events.extend_from_slice(p.events());
        self.histories.push(p.phase_history().to_vec());
        self.ckpts.extend_from_slice(p.checkpoints());
        if let Some(r) = p.restart_record() {
            self.restarts.push((p.spec().epoch, r.clone()));
        }
    }
}

fn init_heap(config: &RunConfig, p: &mut RankProcess<WorkloadApp>) {
    let h = config.workload.heap;
    let rank = p.rank();
    for region in 0..h.regions {
        let bytes = workload::initial_heap_region(config.workload.seed, rank, region, h.region_bytes);
        p.memory().insert(&workload::heap_tag(region), bytes);
    }
}

/// Final digest of a rank. Memory statistics are taken before the heap is
/// read, since reading materializes every lazily mapped region.
fn summarize(
    config: &RunConfig,
    mut p: RankProcess<WorkloadApp>,
    ledger: &mut RankLedger,
) -> Result<RankSummary, HarnessError> {
    ledger.absorb(&p);
    let memory = p.memory().stats();
    let app = p.app().ok_or_else(|| HarnessError::Invalid("rank has no application".into()))?.clone();
    let mut crcs = Vec::new();
    for region in 0..config.workload.heap.regions {
        let tag = workload::heap_tag(region);
        let bytes = p.memory().get(&tag).map_err(CkptError::from)?.unwrap_or(&[]);
        crcs.push(crc32fast::hash(bytes));
    }
    let rank = p.rank();
    Ok(RankSummary {
        rank,
        node: config.workload.node_of(rank),
        iteration: app.iteration(),
        value: app.value(),
        digest: workload::rank_digest(rank, app.value(), &crcs),
        counts: ledger.counts,
        comm: ledger.comm,
        virt: ledger.virt,
        events: std::mem::take(&mut ledger.events),
        phase_histories: std::mem::take(&mut ledger.histories),
        memory,
    })
}

/// Whether `trigger` has fired given rank 0's position and the step count.
fn fired(trigger: Trigger, rank0: (u32, u32), steps: u64) -> bool {
    match trigger {
        Trigger::Iteration(i) => rank0.0 > i || (rank0.0 == i && rank0.1 == 0),
        Trigger::Step(n) => steps >= n,
    }
}

/// Inputs to the report beyond the per-rank summaries.
struct RunFacts {
    launch: LaunchModel,
    launch_secs: f64,
    run_secs: f64,
    end_tick: Tick,
    root_peak_sessions: usize,
    root_connects: u64,
    fabric: FabricMetrics,
    skipped_injections: usize,
    completed_checkpoints: u32,
    aborted_checkpoints: u32,
}

fn finish(
    config: &RunConfig,
    ranks: Vec<RankSummary>,
    ledgers: &[RankLedger],
    facts: RunFacts,
    trace: Vec<TraceEvent>,
    barrier_log: Vec<BarrierRecord>,
) -> RunOutcome {
    let mut ckpts: BTreeMap<u32, Vec<CkptRecord>> = BTreeMap::new();
    for l in ledgers {
        for c in &l.ckpts {
            ckpts.entry(c.id).or_default().push(c.clone());
        }
    }
    let mut restarts: BTreeMap<u32, Vec<RestartRecord>> = BTreeMap::new();
    for l in ledgers {
        for (epoch, r) in &l.restarts {
            restarts.entry(*epoch).or_default().push(r.clone());
        }
    }
    let report = report::build(config, &ranks, ckpts, restarts, &facts);
    RunOutcome { report, ranks, trace, barrier_log }
}

fn legal_histories(ranks: &[RankSummary]) -> bool {
    ranks.iter().all(|r| r.phase_histories.iter().all(|h| is_legal_sequence(h)))
}
