//! Data-parallel helpers for independent simulations.
//!
//! A single simulation is strictly sequential. Sweeps, policy comparisons and
//! batched balancer evaluations are embarrassingly parallel and go through
//! [`map`], which uses rayon when the `parallel` feature is enabled and
//! degrades to a plain iterator otherwise. Output order always matches input
//! order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::engine::{run, RunOptions};
use crate::error::Result;
use crate::metrics::RunReport;
use crate::model::{ClusterConfig, Policy};
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// One cell of a sweep: a policy and the config it runs with.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub label: String,
    pub config: ClusterConfig,
}

impl SweepCell {
    pub fn for_policy(base: &ClusterConfig, policy: Policy) -> Self {
        SweepCell {
            label: policy.to_string(),
            config: base.with_policy(policy),
        }
    }
}

/// Runs every cell against the same trace. Results are in cell order.
pub fn run_cells(cells: &[SweepCell], trace: &Trace, exec: Execution) -> Vec<Result<RunReport>> {
    map(exec, cells, |cell| {
        run(&cell.config, trace, &RunOptions::default()).map(|out| out.report)
    })
}

pub fn compare_policies(
    base: &ClusterConfig,
    policies: &[Policy],
    trace: &Trace,
    exec: Execution,
) -> Vec<Result<RunReport>> {
    let cells: Vec<_> = policies
        .iter()
        .map(|&p| SweepCell::for_policy(base, p))
        .collect();
    run_cells(&cells, trace, exec)
}
