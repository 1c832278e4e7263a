//! Discrete-event engine.
//!
//! [`run`] binds a config to its policy topology, replays a trace through it
//! and assembles a [`RunReport`]. Event logs, per-iteration records and
//! invariant checks are opt-in through [`RunOptions`].

mod kv;
mod queue;
mod sim;

use serde::{Deserialize, Serialize};

use crate::balancer::{CpiStats, SplitDecision};
use crate::error::{Error, Result};
use crate::metrics::{relative_utilization, throughput, InstanceUsage, RunReport};
use crate::model::{validate_config, ClusterConfig, LinkModel, Policy};
use crate::policies::{bind, Frontend, InstanceSpec, Role, Topology};
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub record_events: bool,
    pub record_iterations: bool,
    /// Collect invariant violations (KV over capacity, idle units with
    /// runnable work, token accounting) into [`SimOutcome::violations`].
    pub check_invariants: bool,
    /// Run standalone capacity simulations to fill in relative utilization.
    pub utilization: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            record_events: false,
            record_iterations: false,
            check_invariants: true,
            utilization: true,
        }
    }
}

impl RunOptions {
    /// Everything on; meant for tests and `--emit-events`.
    pub fn verbose() -> Self {
        RunOptions {
            record_events: true,
            record_iterations: true,
            check_invariants: true,
            utilization: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Arrival,
    Rejected,
    Dispatch,
    PrefillStart,
    PrefillEnd,
    IterationStart,
    IterationEnd,
    TransferStart,
    TransferEnd,
    Notify,
    FirstToken,
    Completion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub instance: String,
    pub kind: LogKind,
    pub request: Option<u64>,
}

/// One executed iteration (or one unchunked prefill) on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub instance: String,
    pub start: f64,
    pub end: f64,
    pub batched_tokens: u64,
    pub prefill_tokens: u64,
    pub decode_requests: u64,
    /// Allocated blocks after this iteration's growth.
    pub kv_blocks_used: u64,
    pub kv_blocks_capacity: u64,
    /// `None` for unchunked prefill instances.
    pub token_budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub request: u64,
    pub tokens: u64,
    pub start: f64,
    pub end: f64,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub request: u64,
    pub time: f64,
    pub stats: CpiStats,
    pub decision: SplitDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub report: RunReport,
    pub events: Vec<EventRecord>,
    pub iterations: Vec<IterationRecord>,
    pub transfers: Vec<TransferRecord>,
    pub splits: Vec<SplitRecord>,
    pub violations: Vec<String>,
    /// Highest KV block usage seen on each unit.
    pub peak_kv_blocks: Vec<u64>,
}

pub fn run(cfg: &ClusterConfig, trace: &Trace, opts: &RunOptions) -> Result<SimOutcome> {
    validate_config(cfg).map_err(Error::InvalidConfig)?;
    run_topology(&bind(cfg), cfg.link, trace, opts)
}

pub fn run_topology(topo: &Topology, link: LinkModel, trace: &Trace, opts: &RunOptions) -> Result<SimOutcome> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let raw = sim::Sim::new(topo, link, &trace.requests, *opts).run()?;
    let mut report = RunReport::assemble(topo.policy, trace, raw.records, raw.rejected, Vec::new());
    let span = report.makespan_ms();
    report.instances = topo
        .instances
        .iter()
        .zip(&raw.usage)
        .map(|(spec, u)| InstanceUsage {
            name: spec.name.clone(),
            gpu: spec.gpu.as_str().to_string(),
            iterations: u.iterations,
            busy_ms: u.busy_ms,
            busy_fraction: if span > 0.0 { u.busy_ms / span } else { 0.0 },
            relative_utilization: None,
        })
        .collect();
    if opts.utilization && !matches!(topo.frontend, Frontend::Direct { .. }) {
        fill_relative_utilization(topo, link, trace, &mut report)?;
    }
    Ok(SimOutcome {
        report,
        events: raw.events,
        iterations: raw.iterations,
        transfers: raw.transfers,
        splits: raw.splits,
        violations: raw.violations,
        peak_kv_blocks: raw.peak_kv_blocks,
    })
}

/// Throughput of one instance running its role alone with every request of
/// `trace` queued at time zero.
///
/// Prefill instances run the prompts back to back, decode instances start
/// from fully cached prompts, chunked engines serve whole requests.
pub fn standalone_throughput(spec: &InstanceSpec, policy: Policy, link: LinkModel, trace: &Trace) -> Result<f64> {
    let topo = Topology {
        policy,
        instances: vec![spec.clone()],
        frontend: Frontend::Direct {
            unit: 0,
            prefilled: spec.role == Role::PureDecode,
        },
        ttft_includes_transfer: false,
        pipeline: None,
    };
    let opts = RunOptions {
        record_events: false,
        record_iterations: false,
        check_invariants: false,
        utilization: false,
    };
    let out = run_topology(&topo, link, &trace.all_at_zero(), &opts)?;
    Ok(out.report.throughput)
}

fn fill_relative_utilization(topo: &Topology, link: LinkModel, trace: &Trace, report: &mut RunReport) -> Result<()> {
    for (i, spec) in topo.instances.iter().enumerate() {
        let served = match spec.role {
            Role::PurePrefill | Role::PureDecode => report.throughput,
            Role::DpEngine(_) => {
                let n = report
                    .records
                    .iter()
                    .filter(|r| r.assigned_instance.as_deref() == Some(spec.name.as_str()))
                    .count();
                throughput(n, report.t_start, report.t_end)
            }
            _ => continue,
        };
        let max = standalone_throughput(spec, topo.policy, link, trace)?;
        report.instances[i].relative_utilization = Some(relative_utilization(served, max)?);
    }
    Ok(())
}
