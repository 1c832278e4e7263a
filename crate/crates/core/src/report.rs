//! Tabular output for policy comparisons.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::RunReport;
use crate::model::Policy;
use crate::trace::Trace;

pub const CSV_COLUMNS: [&str; 16] = [
    "policy",
    "trace",
    "trace_hash",
    "status",
    "completed",
    "failed",
    "throughput_rps",
    "ttft_p99_ms",
    "tbt_p99_ms",
    "ttft_mean_ms",
    "tbt_mean_ms",
    "makespan_ms",
    "busy_high",
    "busy_low",
    "util_high",
    "util_low",
];

/// One CSV row. Numbers are pre-rendered with fixed precision so the output
/// is byte-stable across runs and platforms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompareRow {
    pub policy: String,
    pub trace: String,
    pub trace_hash: String,
    pub status: String,
    pub completed: String,
    pub failed: String,
    pub throughput_rps: String,
    pub ttft_p99_ms: String,
    pub tbt_p99_ms: String,
    pub ttft_mean_ms: String,
    pub tbt_mean_ms: String,
    pub makespan_ms: String,
    pub busy_high: String,
    pub busy_low: String,
    pub util_high: String,
    pub util_low: String,
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

/// Highest busy fraction among the instances on `gpu`, and the relative
/// utilization of the first one that has it.
fn gpu_columns(r: &RunReport, gpu: &str) -> (String, String) {
    let on: Vec<_> = r.instances.iter().filter(|i| i.gpu == gpu).collect();
    let busy = on.iter().map(|i| i.busy_fraction).fold(0.0, f64::max);
    let util = on
        .iter()
        .find_map(|i| i.relative_utilization)
        .map(f)
        .unwrap_or_default();
    (f(busy), util)
}

impl CompareRow {
    pub fn from_report(r: &RunReport) -> Self {
        let (busy_high, util_high) = gpu_columns(r, "high");
        let (busy_low, util_low) = gpu_columns(r, "low");
        CompareRow {
            policy: r.policy.to_string(),
            trace: r.trace.clone(),
            trace_hash: r.trace_hash.clone(),
            status: "ok".into(),
            completed: r.completed.to_string(),
            failed: r.failed.len().to_string(),
            throughput_rps: f(r.throughput),
            ttft_p99_ms: f(r.ttft_p99),
            tbt_p99_ms: f(r.tbt_p99),
            ttft_mean_ms: f(r.ttft_mean),
            tbt_mean_ms: f(r.tbt_mean),
            makespan_ms: f(r.makespan_ms()),
            busy_high,
            busy_low,
            util_high,
            util_low,
        }
    }

    /// Row for a policy whose run failed; metrics are left empty.
    pub fn from_error(policy: Policy, trace: &Trace, err: &Error) -> Self {
        CompareRow {
            policy: policy.to_string(),
            trace: trace.name.clone(),
            trace_hash: trace.content_hash(),
            status: format!("error: {err}"),
            completed: String::new(),
            failed: String::new(),
            throughput_rps: String::new(),
            ttft_p99_ms: String::new(),
            tbt_p99_ms: String::new(),
            ttft_mean_ms: String::new(),
            tbt_mean_ms: String::new(),
            makespan_ms: String::new(),
            busy_high: String::new(),
            busy_low: String::new(),
            util_high: String::new(),
            util_low: String::new(),
        }
    }
}

/// CSV with a header and one row per policy, in the order given.
pub fn compare_csv(policies: &[Policy], trace: &Trace, results: &[Result<RunReport>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (p, res) in policies.iter().zip(results) {
        let row = match res {
            Ok(r) => CompareRow::from_report(r),
            Err(e) => CompareRow::from_error(*p, trace, e),
        };
        w.serialize(row).expect("in-memory csv write");
    }
    let bytes = w.into_inner().expect("in-memory csv flush");
    String::from_utf8(bytes).expect("csv is utf-8")
}

/// Outcome of one directional comparison between policies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Throughput ratios, latency orderings and utilization imbalance expected
/// of the partial-prefill policy against the four baselines. Needs a report
/// for every policy; missing ones fail their checks.
pub fn directional_checks(reports: &[RunReport]) -> Vec<Check> {
    let get = |p: Policy| reports.iter().find(|r| r.policy == p);
    let mut out = Vec::new();
    let mut check = |name: &str, pass: Option<bool>, detail: String| {
        out.push(Check {
            name: name.into(),
            pass: pass.unwrap_or(false),
            detail,
        })
    };
    let tp = |p| get(p).map(|r| r.throughput);
    let ratio = |p| Some(tp(Policy::Cronus)? / tp(p)?);
    for (p, min) in [
        (Policy::PpChunked, 1.5),
        (Policy::DisaggLowHigh, 1.5),
        (Policy::DisaggHighLow, 3.0),
    ] {
        let r = ratio(p);
        check(
            &format!("throughput cronus/{p} >= {min}"),
            r.map(|r| r >= min),
            format!("{:.3}", r.unwrap_or(f64::NAN)),
        );
    }
    let r = ratio(Policy::DpChunked);
    check(
        "throughput cronus/dp within 15%",
        r.map(|r| (r - 1.0).abs() <= 0.15),
        format!("{:.3}", r.unwrap_or(f64::NAN)),
    );

    for (label, metric, best) in [
        ("ttft_p99", (|r: &RunReport| r.ttft_p99) as fn(&RunReport) -> f64, Policy::DisaggHighLow),
        ("tbt_p99", |r: &RunReport| r.tbt_p99, Policy::DisaggLowHigh),
    ] {
        let m = |p| get(p).map(metric);
        let min = Policy::ALL.iter().filter_map(|&p| m(p)).fold(f64::INFINITY, f64::min);
        check(
            &format!("{label} minimal under {best}"),
            m(best).map(|v| v <= min && Policy::ALL.iter().all(|&p| m(p).is_some())),
            format!("{:.1} ms", m(best).unwrap_or(f64::NAN)),
        );
        for other in Policy::ALL {
            if other == Policy::Cronus || other == best {
                continue;
            }
            let (c, o) = (m(Policy::Cronus), m(other));
            check(
                &format!("{label} cronus < {other}"),
                c.zip(o).map(|(c, o)| c < o),
                format!("{:.1} vs {:.1} ms", c.unwrap_or(f64::NAN), o.unwrap_or(f64::NAN)),
            );
        }
    }

    for p in [Policy::DisaggHighLow, Policy::DisaggLowHigh] {
        let util = |gpu| get(p)?.instance_on(gpu)?.relative_utilization;
        let (lo, hi) = (util("low"), util("high"));
        check(
            &format!("{p} utilization low >= 0.90, high <= 0.60"),
            lo.zip(hi).map(|(lo, hi)| lo >= 0.9 && hi <= 0.6),
            format!("low {:.2} high {:.2}", lo.unwrap_or(f64::NAN), hi.unwrap_or(f64::NAN)),
        );
    }
    out
}
