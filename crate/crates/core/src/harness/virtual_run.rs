//! Single-threaded deterministic driver under the virtual clock.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use log::debug;

use super::{
    finish, fired, init_heap, model_launch, summarize, HarnessError, Injection, RankLedger, RunConfig, RunFacts,
    RunOutcome, Start, WorkloadApp,
};
use crate::ckpt::{RankProcess, Step};
use crate::coordinator::{Attach, Bus, CoordConfig, Topology};
use crate::fabric::{ClockMode, Fabric, Tick};

/// Steps a rank may take in one sweep before the next rank gets a turn.
const STEP_BUDGET: usize = 64;

type Proc = RankProcess<WorkloadApp>;

struct Driver<'a> {
    config: &'a RunConfig,
    fabric: Arc<Fabric>,
    bus: Arc<Bus>,
    epoch: u32,
}

impl Driver<'_> {
    fn attach(&self, rank: u32) -> Attach {
        match self.config.topology {
            Topology::Flat => Attach::Root,
            Topology::Tree => Attach::Node(self.config.workload.node_of(rank)),
        }
    }

    fn start_subs(&self) -> Result<(), HarnessError> {
        if self.config.topology == Topology::Tree {
            for node in 0..self.config.workload.nodes {
                self.bus.start_sub(node, self.config.workload.ranks_per_node())?;
            }
        }
        Ok(())
    }

    fn launch(&self) -> Result<Vec<Proc>, HarnessError> {
        let w = &self.config.workload;
        let mut procs = Vec::with_capacity(w.ranks as usize);
        for rank in 0..w.ranks {
            let session = self.bus.connect(self.attach(rank))?;
            let app = WorkloadApp::new(w.clone(), rank);
            let mut p = RankProcess::launch(self.config.proc_spec(rank, 0), self.fabric.clone(), Box::new(session), app)?;
            init_heap(self.config, &mut p);
            procs.push(p);
        }
        Ok(procs)
    }

    fn restart(&self) -> Result<Vec<Proc>, HarnessError> {
        let w = &self.config.workload;
        let store = self.config.store();
        let generation = store.latest_complete(w.ranks).ok_or(HarnessError::NoImage(w.ranks))?;
        debug!("restarting {} ranks from generation {generation}, epoch {}", w.ranks, self.epoch);
        let mut procs = Vec::with_capacity(w.ranks as usize);
        for rank in 0..w.ranks {
            let session = self.bus.connect(self.attach(rank))?;
            procs.push(RankProcess::restart(
                self.config.proc_spec(rank, self.epoch),
                self.fabric.clone(),
                Box::new(session),
                store.path(generation, rank),
                self.config.lazy_restart,
            )?);
        }
        Ok(procs)
    }

    /// Destroys every rank and the fabric generation, then restarts.
    fn kill_and_restart(&mut self, procs: &mut Vec<Proc>, ledgers: &mut [RankLedger]) -> Result<(), HarnessError> {
        for p in procs.drain(..) {
            ledgers[p.rank() as usize].absorb(&p);
        }
        if self.config.topology == Topology::Tree {
            for node in 0..self.config.workload.nodes {
                self.bus.kill_sub(node);
            }
        }
        self.fabric.kill_all();
        self.fabric.reassign_identifiers_with(self.config.reassign)?;
        self.start_subs()?;
        self.epoch += 1;
        *procs = self.restart()?;
        Ok(())
    }
}

pub(super) fn run(config: &RunConfig, start: Start) -> Result<RunOutcome, HarnessError> {
    let started = Instant::now();
    let w = &config.workload;
    let launch = model_launch(config)?;
    let fabric = config.new_fabric()?;
    let bus = Bus::new(w.ranks, CoordConfig::for_clock(ClockMode::Virtual), fabric.shared_clock());
    let mut driver = Driver { config, fabric: fabric.clone(), bus: bus.clone(), epoch: 0 };
    driver.start_subs()?;
    let mut procs = match start {
        Start::Fresh => driver.launch()?,
        Start::FromImages => {
            driver.epoch = 1;
            driver.restart()?
        }
    };
    let mut ledgers = vec![RankLedger::default(); w.ranks as usize];
    let mut pending: VecDeque<Injection> = config.injections.iter().copied().collect();
    // (completed, aborted) before the request, and whether to kill after.
    let mut awaiting: Option<(u32, u32, bool)> = None;
    let mut steps: u64 = 0;
    let mut launch_secs = None;
    let mut skipped = 0;

    loop {
        if awaiting.is_none() {
            if let Some(inj) = pending.front().copied() {
                let rank0 = procs[0].app().map_or((0, 0), |a| (a.iteration(), a.pc()));
                if procs.iter().all(|p| p.is_finished()) {
                    skipped += pending.len();
                    pending.clear();
                } else if fired(inj.trigger, rank0, steps) {
                    let before = bus.with_root(|r| (r.completed_checkpoints(), r.aborted_checkpoints()));
                    let id = bus.request_checkpoint()?;
                    debug!("checkpoint {id} requested at t={} after {steps} steps", fabric.now());
                    awaiting = Some((before.0, before.1, inj.kill_and_restart));
                    pending.pop_front();
                }
            }
        }

        let mut progressed = false;
        let mut wake: Option<Tick> = None;
        for p in procs.iter_mut() {
            for _ in 0..STEP_BUDGET {
                let in_app = p.is_running() && !p.is_finished();
                match p.step()? {
                    Step::Progress => {
                        progressed = true;
                        if in_app {
                            steps += 1;
                        }
                    }
                    Step::Blocked(t) => {
                        if let Some(t) = t {
                            wake = Some(wake.map_or(t, |x| x.min(t)));
                        }
                        break;
                    }
                    Step::Finished => break,
                }
            }
        }
        if launch_secs.is_none() && procs.iter().all(|p| p.is_running()) {
            launch_secs = Some(started.elapsed().as_secs_f64());
        }

        if let Some((completed, aborted, kill)) = awaiting {
            let now = bus.with_root(|r| (r.completed_checkpoints(), r.aborted_checkpoints()));
            if now.0 > completed || now.1 > aborted {
                awaiting = None;
                if kill {
                    driver.kill_and_restart(&mut procs, &mut ledgers)?;
                    continue;
                }
            }
        }

        if awaiting.is_none() && pending.is_empty() && procs.iter().all(|p| p.is_finished()) {
            break;
        }
        if !progressed {
            let now = fabric.now();
            let next = [wake.filter(|t| *t > now), fabric.next_delivery_after(now), bus.next_deadline()]
                .into_iter()
                .flatten()
                .min();
            match next {
                Some(t) => {
                    fabric.clock().advance_to(t);
                    bus.tick();
                }
                None => return Err(deadlock(&procs, now)),
            }
        }
    }

    let end_tick = fabric.now();
    let mut ranks = Vec::with_capacity(procs.len());
    for p in procs {
        let r = p.rank() as usize;
        ranks.push(summarize(config, p, &mut ledgers[r])?);
    }
    let (peak, completed, aborted, log) = bus.with_root(|r| {
        (r.peak_sessions(), r.completed_checkpoints(), r.aborted_checkpoints(), r.barrier_log().to_vec())
    });
    let facts = RunFacts {
        launch,
        launch_secs: launch_secs.unwrap_or(0.0),
        run_secs: started.elapsed().as_secs_f64(),
        end_tick,
        root_peak_sessions: peak,
        root_connects: bus.root_connects(),
        fabric: fabric.metrics(),
        skipped_injections: skipped,
        completed_checkpoints: completed,
        aborted_checkpoints: aborted,
    };
    Ok(finish(config, ranks, &ledgers, facts, fabric.trace(), log))
}

fn deadlock(procs: &[Proc], now: Tick) -> HarnessError {
    let detail = procs
        .iter()
        .filter(|p| !p.is_finished())
        .map(|p| {
            let pos = p.app().map_or((0, 0), |a| (a.iteration(), a.pc()));
            format!("rank {} in {:?} at iteration {} step {}", p.rank(), p.phase(), pos.0, pos.1)
        })
        .collect::<Vec<_>>()
        .join("; ");
    HarnessError::Deadlock { now, detail }
}
