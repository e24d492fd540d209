//! Run reports: one JSON object per run with fixed field names, plus a
//! human-readable rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{legal_histories, RankSummary, RunConfig, RunFacts};
use crate::ckpt::{CkptRecord, RestartRecord};
use crate::coordinator::{Phase as MsgPhase, Topology};
use crate::fabric::{ClockMode, FabricMetrics, Tick};
use crate::virt::ResolvePolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub id: u32,
    pub committed: bool,
    pub timed_out: bool,
    /// Slowest rank, from the checkpoint request to resuming.
    pub checkpoint_secs: f64,
    /// Duration of the write phase: summed over ranks when they write one
    /// after another (virtual clock), the slowest rank when they write
    /// concurrently (wall clock).
    pub write_phase_secs: f64,
    pub image_bytes_total: u64,
    pub image_bytes_per_rank: Vec<u64>,
    /// `image_bytes_total / write_phase_secs`.
    pub bandwidth_bytes_per_sec: f64,
    pub drained_messages: usize,
    pub max_windows: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub epoch: u32,
    pub lazy: bool,
    /// Slowest rank, from the start of the restart to running again.
    pub restart_secs: f64,
    pub max_load_secs: f64,
    pub image_bytes_total: u64,
    pub redelivered_messages: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankControl {
    pub rank: u32,
    pub launch: u64,
    pub steady: u64,
    pub checkpoint: u64,
    pub restart: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub workload: String,
    pub ranks: u32,
    pub nodes: u32,
    pub iterations: u32,
    pub payload_bytes: usize,
    pub seed: u64,
    pub topology: String,
    pub clock: String,
    pub resolve: String,
    /// 64-bit digest of every rank's final state, as 16 hex digits.
    pub final_checksum: String,
    pub launch_secs: f64,
    pub launch_ticks: Tick,
    pub peak_root_attempts: usize,
    pub launch_refusals: u64,
    pub run_secs: f64,
    pub end_tick: Tick,
    pub root_peak_sessions: usize,
    pub root_connects: u64,
    pub checkpoints: Vec<CheckpointSummary>,
    pub completed_checkpoints: u32,
    pub aborted_checkpoints: u32,
    pub skipped_injections: usize,
    pub restarts: Vec<RestartSummary>,
    pub control_messages: Vec<RankControl>,
    pub rc_sends: u64,
    pub ud_sends: u64,
    pub ud_resolve_queries: u64,
    pub steady_control_messages: u64,
    pub steady_control_per_send: f64,
    pub redelivered_messages: u64,
    pub fabric: FabricMetrics,
    pub misdelivered: u64,
    pub malformed: u64,
    pub mapped_bytes: u64,
    pub materialized_bytes: u64,
    pub phase_sequences_legal: bool,
    pub violations: Vec<String>,
    pub invariants_ok: bool,
}

impl RunReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn checksum(&self) -> u64 {
        u64::from_str_radix(&self.final_checksum, 16).unwrap_or(0)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} ranks={} nodes={} iters={} seed={} topology={} clock={}",
            self.workload, self.ranks, self.nodes, self.iterations, self.seed, self.topology, self.clock
        );
        let _ = writeln!(s, "checksum        {}", self.final_checksum);
        let _ = writeln!(s, "launch          {:.3} s ({} ticks modelled)", self.launch_secs, self.launch_ticks);
        let _ = writeln!(s, "run             {:.3} s", self.run_secs);
        let _ = writeln!(s, "root sessions   {} peak, {} connects", self.root_peak_sessions, self.root_connects);
        for c in &self.checkpoints {
            let per_rank = c.image_bytes_total as f64 / c.image_bytes_per_rank.len().max(1) as f64;
            let _ = writeln!(
                s,
                "checkpoint {:<4} {:.3} s, {} bytes ({:.0} per rank), {:.1} MB/s, {} drained, {} windows{}",
                c.id,
                c.checkpoint_secs,
                c.image_bytes_total,
                per_rank,
                c.bandwidth_bytes_per_sec / 1e6,
                c.drained_messages,
                c.max_windows,
                if c.committed { "" } else { ", not committed" }
            );
        }
        for r in &self.restarts {
            let _ = writeln!(
                s,
                "restart {:<7} {:.3} s ({}), {} bytes, {} redelivered",
                r.epoch,
                r.restart_secs,
                if r.lazy { "lazy" } else { "eager" },
                r.image_bytes_total,
                r.redelivered_messages
            );
        }
        let _ = writeln!(
            s,
            "sends           {} rc, {} ud; {} resolve queries; {:.4} steady control msgs per send",
            self.rc_sends, self.ud_sends, self.ud_resolve_queries, self.steady_control_per_send
        );
        let f = &self.fabric;
        let _ = writeln!(
            s,
            "fabric          sent {} delivered {} dropped {} blackholed {} discarded on kill {}",
            f.sent, f.delivered, f.dropped, f.blackholed, f.discarded_on_kill
        );
        if self.violations.is_empty() {
            let _ = writeln!(s, "invariants      ok");
        } else {
            for v in &self.violations {
                let _ = writeln!(s, "VIOLATION       {v}");
            }
        }
        s
    }
}

pub(super) fn build(
    config: &RunConfig,
    ranks: &[RankSummary],
    ckpts: BTreeMap<u32, Vec<CkptRecord>>,
    restarts: BTreeMap<u32, Vec<RestartRecord>>,
    facts: &RunFacts,
) -> RunReport {
    let w = &config.workload;
    let concurrent = config.clock() == ClockMode::Wall;
    let checkpoints: Vec<CheckpointSummary> = ckpts
        .into_iter()
        .map(|(id, recs)| {
            let write_phase_secs = if concurrent {
                recs.iter().map(|r| r.write_secs).fold(0.0, f64::max)
            } else {
                recs.iter().map(|r| r.write_secs).sum()
            };
            let image_bytes_total = recs.iter().map(|r| r.image_bytes).sum();
            CheckpointSummary {
                id,
                committed: recs.len() == w.ranks as usize && recs.iter().all(|r| r.committed),
                timed_out: recs.iter().any(|r| r.timed_out),
                checkpoint_secs: recs.iter().map(|r| r.total_secs).fold(0.0, f64::max),
                write_phase_secs,
                image_bytes_total,
                image_bytes_per_rank: recs.iter().map(|r| r.image_bytes).collect(),
                bandwidth_bytes_per_sec: if write_phase_secs > 0.0 {
                    image_bytes_total as f64 / write_phase_secs
                } else {
                    0.0
                },
                drained_messages: recs.iter().map(|r| r.drained).sum(),
                max_windows: recs.iter().map(|r| r.windows).max().unwrap_or(0),
            }
        })
        .collect();
    let restarts: Vec<RestartSummary> = restarts
        .into_iter()
        .map(|(epoch, recs)| RestartSummary {
            epoch,
            lazy: recs.iter().all(|r| r.lazy),
            restart_secs: recs.iter().map(|r| r.first_resume_secs).fold(0.0, f64::max),
            max_load_secs: recs.iter().map(|r| r.load_secs).fold(0.0, f64::max),
            image_bytes_total: recs.iter().map(|r| r.image_bytes).sum(),
            redelivered_messages: recs.iter().map(|r| r.restored_drained).sum(),
        })
        .collect();

    let control_messages: Vec<RankControl> = ranks
        .iter()
        .map(|r| RankControl {
            rank: r.rank,
            launch: r.counts.total(MsgPhase::Launch),
            steady: r.counts.total(MsgPhase::Steady),
            checkpoint: r.counts.total(MsgPhase::Checkpoint),
            restart: r.counts.total(MsgPhase::Restart),
        })
        .collect();
    let rc_sends: u64 = ranks.iter().map(|r| r.comm.rc_sent).sum();
    let ud_sends: u64 = ranks.iter().map(|r| r.comm.ud_sent).sum();
    let ud_resolve_queries: u64 = ranks.iter().map(|r| r.virt.queries).sum();
    let steady: u64 = control_messages.iter().map(|c| c.steady).sum();
    let sends = rc_sends + ud_sends;
    let misdelivered = ranks.iter().map(|r| r.virt.misdelivered).sum();
    let malformed = ranks.iter().map(|r| r.virt.malformed).sum();
    let phase_sequences_legal = legal_histories(ranks);
    let checksum = super::workload::combine_digests(&ranks.iter().map(|r| r.digest).collect::<Vec<_>>());

    let mut violations = Vec::new();
    for r in ranks.iter().filter(|r| r.iteration != w.iterations) {
        violations.push(format!("rank {} stopped at iteration {} of {}", r.rank, r.iteration, w.iterations));
    }
    let f = facts.fabric;
    if !f.conserved() {
        violations.push(format!("fabric counters not conserved: {f:?}"));
    }
    if f.blackholed > 0 {
        violations.push(format!("{} datagrams sent to stale or unknown addresses", f.blackholed));
    }
    if config.fabric.ud_drop_rate == 0.0 && f.dropped > 0 {
        violations.push(format!("{} datagrams dropped with a zero drop rate", f.dropped));
    }
    if misdelivered > 0 || malformed > 0 {
        violations.push(format!("{misdelivered} misdelivered and {malformed} malformed datagrams"));
    }
    if !phase_sequences_legal {
        violations.push("illegal phase sequence".into());
    }
    if ud_sends == 0 && steady > 0 {
        violations.push(format!("{steady} control messages during steady state without datagram traffic"));
    }
    if config.resolve == ResolvePolicy::PerSend && ud_resolve_queries != ranks.iter().map(|r| r.virt.sends).sum::<u64>() {
        violations.push("resolve queries differ from datagram sends under per-send resolution".into());
    }

    RunReport {
        workload: w.kind.name().into(),
        ranks: w.ranks,
        nodes: w.nodes,
        iterations: w.iterations,
        payload_bytes: w.payload_bytes,
        seed: w.seed,
        topology: match config.topology {
            Topology::Flat => "flat".into(),
            Topology::Tree => "tree".into(),
        },
        clock: match config.clock() {
            ClockMode::Virtual => "virtual".into(),
            ClockMode::Wall => "wall".into(),
        },
        resolve: match config.resolve {
            ResolvePolicy::PerSend => "per_send".into(),
            ResolvePolicy::GenerationCached => "generation_cached".into(),
        },
        final_checksum: format!("{checksum:016x}"),
        launch_secs: facts.launch_secs,
        launch_ticks: facts.launch.ticks,
        peak_root_attempts: facts.launch.peak_root_attempts,
        launch_refusals: facts.launch.refusals,
        run_secs: facts.run_secs,
        end_tick: facts.end_tick,
        root_peak_sessions: facts.root_peak_sessions,
        root_connects: facts.root_connects,
        checkpoints,
        completed_checkpoints: facts.completed_checkpoints,
        aborted_checkpoints: facts.aborted_checkpoints,
        skipped_injections: facts.skipped_injections,
        restarts,
        control_messages,
        rc_sends,
        ud_sends,
        ud_resolve_queries,
        steady_control_messages: steady,
        steady_control_per_send: if sends > 0 { steady as f64 / sends as f64 } else { 0.0 },
        redelivered_messages: ranks.iter().map(|r| r.comm.redelivered).sum(),
        fabric: f,
        misdelivered,
        malformed,
        mapped_bytes: ranks.iter().map(|r| r.memory.mapped_bytes).sum(),
        materialized_bytes: ranks.iter().map(|r| r.memory.materialized_bytes).sum(),
        phase_sequences_legal,
        invariants_ok: violations.is_empty(),
        violations,
    }
}
