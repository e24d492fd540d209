//! Concurrent driver under the wall clock: one thread per rank, control
//! plane over loopback TCP.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::debug;

use super::{
    finish, fired, init_heap, model_launch, summarize, HarnessError, Injection, RankLedger, RunConfig, RunFacts,
    RunOutcome, Start, WorkloadApp,
};
use crate::ckpt::{CkptError, RankProcess, Step};
use crate::coordinator::{CoordConfig, TcpRoot, TcpSession, TcpSub, Topology};
use crate::fabric::{ClockMode, Fabric};

type Proc = RankProcess<WorkloadApp>;

const POLL: Duration = Duration::from_micros(200);

#[derive(Default)]
struct Shared {
    stop: AtomicBool,
    steps: AtomicU64,
    /// Rank 0's `(iteration << 32) | pc`.
    rank0: AtomicU64,
}

struct RankThread {
    running: Arc<AtomicBool>,
    finished: Arc<AtomicBool>,
    handle: JoinHandle<Result<Proc, CkptError>>,
}

fn spawn(mut p: Proc, shared: Arc<Shared>) -> RankThread {
    let running = Arc::new(AtomicBool::new(false));
    let finished = Arc::new(AtomicBool::new(false));
    let (r, f) = (running.clone(), finished.clone());
    let handle = thread::Builder::new()
        .name(format!("rank-{}", p.rank()))
        .spawn(move || {
            while !shared.stop.load(Ordering::Acquire) {
                let in_app = p.is_running() && !p.is_finished();
                let step = p.step()?;
                if p.is_running() {
                    r.store(true, Ordering::Release);
                }
                f.store(p.is_finished(), Ordering::Release);
                if p.rank() == 0 {
                    if let Some(a) = p.app() {
                        shared.rank0.store(((a.iteration() as u64) << 32) | a.pc() as u64, Ordering::Release);
                    }
                }
                match step {
                    Step::Progress => {
                        if in_app {
                            shared.steps.fetch_add(1, Ordering::AcqRel);
                        }
                    }
                    Step::Blocked(Some(t)) => {
                        let now = p.comm().now();
                        let wait = Duration::from_millis(t.saturating_sub(now)).min(Duration::from_millis(1));
                        thread::sleep(wait.max(POLL));
                    }
                    Step::Blocked(None) | Step::Finished => thread::sleep(POLL),
                }
            }
            Ok(p)
        })
        .expect("spawn rank thread");
    RankThread { running, finished, handle }
}

struct Driver<'a> {
    config: &'a RunConfig,
    fabric: Arc<Fabric>,
    root: TcpRoot,
    subs: Vec<TcpSub>,
    epoch: u32,
}

impl Driver<'_> {
    fn start_subs(&mut self) -> Result<(), HarnessError> {
        if self.config.topology == Topology::Tree {
            let w = &self.config.workload;
            for node in 0..w.nodes {
                self.subs.push(TcpSub::start(node, w.ranks_per_node(), self.root.addr(), &self.config.backoff)?);
            }
        }
        Ok(())
    }

    fn addr(&self, rank: u32) -> SocketAddr {
        match self.config.topology {
            Topology::Flat => self.root.addr(),
            Topology::Tree => self.subs[self.config.workload.node_of(rank) as usize].addr(),
        }
    }

    fn session(&self, rank: u32) -> Result<Box<TcpSession>, HarnessError> {
        Ok(Box::new(TcpSession::connect(self.addr(rank), &self.config.backoff)?))
    }

    fn launch(&self) -> Result<Vec<Proc>, HarnessError> {
        let w = &self.config.workload;
        let mut procs = Vec::with_capacity(w.ranks as usize);
        for rank in 0..w.ranks {
            let app = WorkloadApp::new(w.clone(), rank);
            let mut p = RankProcess::launch(self.config.proc_spec(rank, 0), self.fabric.clone(), self.session(rank)?, app)?;
            init_heap(self.config, &mut p);
            procs.push(p);
        }
        Ok(procs)
    }

    fn restart(&self) -> Result<Vec<Proc>, HarnessError> {
        let w = &self.config.workload;
        let store = self.config.store();
        let generation = store.latest_complete(w.ranks).ok_or(HarnessError::NoImage(w.ranks))?;
        let mut procs = Vec::with_capacity(w.ranks as usize);
        for rank in 0..w.ranks {
            procs.push(RankProcess::restart(
                self.config.proc_spec(rank, self.epoch),
                self.fabric.clone(),
                self.session(rank)?,
                store.path(generation, rank),
                self.config.lazy_restart,
            )?);
        }
        Ok(procs)
    }

    /// Waits until the root has noticed every lost connection.
    fn await_root_empty(&self, deadline: Instant) -> Result<(), HarnessError> {
        loop {
            let s = self.root.stats()?;
            if s.registered == 0 && s.sessions == 0 {
                return Ok(());
            }
            if Instant::now() > deadline {
                return Err(HarnessError::TimedOut(self.config.time_limit));
            }
            thread::sleep(Duration::from_millis(1));
        }
    }
}

fn stop_all(threads: Vec<RankThread>, shared: &Shared) -> Result<Vec<Proc>, HarnessError> {
    shared.stop.store(true, Ordering::Release);
    let mut procs = Vec::with_capacity(threads.len());
    let mut first_err = None;
    for t in threads {
        match t.handle.join() {
            Ok(Ok(p)) => procs.push(p),
            Ok(Err(e)) => {
                first_err.get_or_insert(HarnessError::Ckpt(e));
            }
            Err(_) => {
                first_err.get_or_insert(HarnessError::Panicked);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(procs),
    }
}

pub(super) fn run(config: &RunConfig, start: Start) -> Result<RunOutcome, HarnessError> {
    let started = Instant::now();
    let deadline = started + config.time_limit;
    let w = &config.workload;
    let launch = model_launch(config)?;
    let fabric = config.new_fabric()?;
    let root = TcpRoot::start("127.0.0.1:0", w.ranks, CoordConfig::for_clock(ClockMode::Wall), fabric.shared_clock())?;
    let mut driver = Driver { config, fabric: fabric.clone(), root, subs: Vec::new(), epoch: 0 };
    driver.start_subs()?;
    let procs = match start {
        Start::Fresh => driver.launch()?,
        Start::FromImages => {
            driver.epoch = 1;
            driver.restart()?
        }
    };
    let mut shared = Arc::new(Shared::default());
    let mut threads: Vec<RankThread> = procs.into_iter().map(|p| spawn(p, shared.clone())).collect();
    let mut ledgers = vec![RankLedger::default(); w.ranks as usize];
    let mut pending: VecDeque<Injection> = config.injections.iter().copied().collect();
    let mut awaiting: Option<(u32, u32, bool)> = None;
    let mut launch_secs = None;
    let mut skipped = 0;

    let procs = loop {
        if threads.iter().any(|t| t.handle.is_finished()) {
            // A rank thread only returns early on error.
            stop_all(threads, &shared)?;
            return Err(HarnessError::Invalid("rank thread exited early".into()));
        }
        if Instant::now() > deadline {
            let _ = stop_all(threads, &shared);
            return Err(HarnessError::TimedOut(config.time_limit));
        }
        let all_running = threads.iter().all(|t| t.running.load(Ordering::Acquire));
        let all_finished = threads.iter().all(|t| t.finished.load(Ordering::Acquire));
        if launch_secs.is_none() && all_running {
            launch_secs = Some(started.elapsed().as_secs_f64());
        }

        if let Some((completed, aborted, kill)) = awaiting {
            let s = driver.root.stats()?;
            if s.completed_checkpoints > completed || s.aborted_checkpoints > aborted {
                awaiting = None;
                if kill {
                    for p in stop_all(threads, &shared)? {
                        ledgers[p.rank() as usize].absorb(&p);
                    }
                    driver.subs.clear();
                    driver.await_root_empty(deadline)?;
                    fabric.kill_all();
                    fabric.reassign_identifiers_with(config.reassign)?;
                    driver.start_subs()?;
                    driver.epoch += 1;
                    debug!("restarting for epoch {}", driver.epoch);
                    shared = Arc::new(Shared::default());
                    threads = driver.restart()?.into_iter().map(|p| spawn(p, shared.clone())).collect();
                    continue;
                }
            }
        } else if let Some(inj) = pending.front().copied() {
            let pos = shared.rank0.load(Ordering::Acquire);
            let rank0 = ((pos >> 32) as u32, pos as u32);
            if all_finished {
                skipped += pending.len();
                pending.clear();
            } else if fired(inj.trigger, rank0, shared.steps.load(Ordering::Acquire)) {
                let before = driver.root.stats()?;
                driver.root.request_checkpoint()?;
                awaiting = Some((before.completed_checkpoints, before.aborted_checkpoints, inj.kill_and_restart));
                pending.pop_front();
            }
        }
        if awaiting.is_none() && pending.is_empty() && all_finished {
            break stop_all(threads, &shared)?;
        }
        thread::sleep(Duration::from_millis(1));
    };

    let end_tick = fabric.now();
    let mut ranks = Vec::with_capacity(procs.len());
    for p in procs {
        let r = p.rank() as usize;
        ranks.push(summarize(config, p, &mut ledgers[r])?);
    }
    let stats = driver.root.stats()?;
    let facts = RunFacts {
        launch,
        launch_secs: launch_secs.unwrap_or(0.0),
        run_secs: started.elapsed().as_secs_f64(),
        end_tick,
        root_peak_sessions: stats.peak_sessions,
        root_connects: stats.connects,
        fabric: fabric.metrics(),
        skipped_injections: skipped,
        completed_checkpoints: stats.completed_checkpoints,
        aborted_checkpoints: stats.aborted_checkpoints,
    };
    Ok(finish(config, ranks, &ledgers, facts, fabric.trace(), Vec::new()))
}
