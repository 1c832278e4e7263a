//! Throughput, latency percentiles and utilization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Policy, RequestRecord};

/// Nearest-rank percentile: the element at 1-based rank `ceil(p * n)` of the
/// sorted samples.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside (0, 1]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Guard against p * n landing a hair above an integer.
    let exact = p * sorted.len() as f64;
    let rank = if (exact - exact.round()).abs() < 1e-9 {
        exact.round() as usize
    } else {
        exact.ceil() as usize
    };
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Completed requests per second over `[t_start, t_end]` (ms).
pub fn throughput(completed: usize, t_start: f64, t_end: f64) -> f64 {
    let span = (t_end - t_start) / 1000.0;
    if completed == 0 {
        0.0
    } else if span <= 0.0 {
        f64::INFINITY
    } else {
        completed as f64 / span
    }
}

/// System throughput divided by an instance's standalone maximum.
pub fn relative_utilization(run_throughput: f64, standalone_max: f64) -> Result<f64> {
    if !(standalone_max > 0.0) {
        return Err(Error::ZeroStandalone);
    }
    Ok(run_throughput / standalone_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceUsage {
    pub name: String,
    /// `high` or `low`.
    pub gpu: String,
    pub iterations: u64,
    pub busy_ms: f64,
    /// Busy time over the run's span.
    pub busy_fraction: f64,
    /// System throughput over this instance's standalone maximum, where the
    /// instance has a well-defined standalone role.
    pub relative_utilization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: Policy,
    pub trace: String,
    pub trace_hash: String,
    pub completed: usize,
    pub throughput: f64,
    pub ttft_p99: f64,
    pub tbt_p99: f64,
    pub ttft_mean: f64,
    pub tbt_mean: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub instances: Vec<InstanceUsage>,
    pub records: Vec<RequestRecord>,
    pub failed: Vec<u64>,
}

impl RunReport {
    pub fn assemble(
        policy: Policy,
        trace: &crate::trace::Trace,
        records: Vec<RequestRecord>,
        failed: Vec<u64>,
        instances: Vec<InstanceUsage>,
    ) -> RunReport {
        let t_start = trace
            .requests
            .first()
            .map(|r| r.arrival_time)
            .unwrap_or(0.0);
        let t_end = records
            .iter()
            .map(|r| r.completion_time)
            .fold(t_start, f64::max);
        let ttfts: Vec<f64> = records.iter().map(|r| r.ttft).collect();
        let tbts: Vec<f64> = records
            .iter()
            .flat_map(|r| r.tbt_samples.iter().copied())
            .collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        RunReport {
            policy,
            trace: trace.name.clone(),
            trace_hash: trace.content_hash(),
            completed: records.len(),
            throughput: throughput(records.len(), t_start, t_end),
            ttft_p99: percentile(&ttfts, 0.99).unwrap_or(0.0),
            tbt_p99: percentile(&tbts, 0.99).unwrap_or(0.0),
            ttft_mean: mean(&ttfts),
            tbt_mean: mean(&tbts),
            t_start,
            t_end,
            instances,
            records,
            failed,
        }
    }

    pub fn makespan_ms(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Usage entry of the first instance on the given GPU (`high`/`low`).
    pub fn instance_on(&self, gpu: &str) -> Option<&InstanceUsage> {
        self.instances.iter().find(|i| i.gpu == gpu)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "policy        {}", self.policy);
        let _ = writeln!(out, "trace         {} ({})", self.trace, self.trace_hash);
        let _ = writeln!(out, "completed     {} (failed {})", self.completed, self.failed.len());
        let _ = writeln!(out, "throughput    {:.3} req/s", self.throughput);
        let _ = writeln!(out, "makespan      {:.1} ms", self.makespan_ms());
        let _ = writeln!(out, "ttft p99      {:.1} ms (mean {:.1})", self.ttft_p99, self.ttft_mean);
        let _ = writeln!(out, "tbt p99       {:.2} ms (mean {:.2})", self.tbt_p99, self.tbt_mean);
        for i in &self.instances {
            let rel = i
                .relative_utilization
                .map(|u| format!("{:.0}%", u * 100.0))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "  {:<14} gpu={:<4} iters={:<7} busy={:>5.1}% rel={}",
                i.name,
                i.gpu,
                i.iterations,
                i.busy_fraction * 100.0,
                rel
            );
        }
        out
    }
}
