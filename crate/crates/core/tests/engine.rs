//! Engine behaviour against hand-derived event sequences.
//!
//! Expected values are computed here directly from the profile fields, not
//! through the crate's cost-model functions.

use hetsim::engine::{run, LogKind, RunOptions};
use hetsim::model::{ClusterConfig, GpuProfile, Policy, Request};
use hetsim::presets;
use hetsim::trace::Trace;

fn trace_of(reqs: &[(f64, u32, u32)]) -> Trace {
    let requests = reqs
        .iter()
        .enumerate()
        .map(|(i, &(t, input, output))| Request {
            id: i as u64,
            arrival_time: t,
            input_len: input,
            output_len: output,
        })
        .collect();
    Trace::new("test", requests).unwrap()
}

fn cfg(policy: Policy) -> ClusterConfig {
    presets::a100_a10_llama8b().with_policy(policy)
}

fn prefill(p: &GpuProfile, len: u32) -> f64 {
    p.prefill_k * len as f64 + p.prefill_b
}

fn iter(p: &GpuProfile, budget: u32, prefill_ctx: u64, decode_ctx: u64) -> f64 {
    let b = p.chunked_b * budget as f64 / p.chunked_ref_tokens as f64;
    p.chunked_k_ctxp * prefill_ctx as f64 + p.chunked_k_ctxd * decode_ctx as f64 + b
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

#[test]
fn disagg_high_low_single_request() {
    let c = cfg(Policy::DisaggHighLow);
    let out = run(&c, &trace_of(&[(0.0, 512, 2)]), &RunOptions::verbose()).unwrap();
    let r = &out.report.records[0];
    let transfer = c.link.latency + c.link.kv_cost_per_token * 512.0 / c.link.bandwidth;
    let ttft = prefill(&c.high_gpu, 512) + transfer;
    assert!(close(r.ttft, ttft), "{} vs {}", r.ttft, ttft);
    let done = ttft + iter(&c.low_gpu, 512, 0, 513);
    assert!(close(r.completion_time, done), "{} vs {}", r.completion_time, done);
    assert_eq!(r.tbt_samples.len(), 1);
    assert!(out.violations.is_empty(), "{:?}", out.violations);
}

#[test]
fn disagg_low_high_single_request() {
    let c = cfg(Policy::DisaggLowHigh);
    let out = run(&c, &trace_of(&[(250.0, 1000, 3)]), &RunOptions::verbose()).unwrap();
    let r = &out.report.records[0];
    let transfer = c.link.latency + 1000.0 / c.link.bandwidth;
    let ttft = prefill(&c.low_gpu, 1000) + transfer;
    assert!(close(r.ttft, ttft));
    let t2 = iter(&c.high_gpu, 512, 0, 1001);
    let t3 = iter(&c.high_gpu, 512, 0, 1002);
    assert!(close(r.completion_time, 250.0 + ttft + t2 + t3));
    // TTFT of a low-end prefill is at least the low-end prefill time.
    assert!(r.ttft >= prefill(&c.low_gpu, 1000));
}

/// Brute-force split for an idle chunked instance.
fn idle_split(low: &GpuProfile, high: &GpuProfile, l_in: u32) -> u32 {
    let n_p = 512u64;
    let mut best = (f64::INFINITY, 0u32);
    for i in 1..=512u64 {
        let l_p = (i * l_in as u64).div_ceil(512);
        let l_c = l_in as u64 - l_p;
        let (n_iter, l_last) = if l_c == 0 {
            (1, l_in as u64)
        } else {
            (l_c.div_ceil(n_p), l_p + (l_c / n_p) * n_p)
        };
        let t_pre = low.prefill_k * l_p as f64 + low.prefill_b;
        let t_chk = n_iter as f64 * (high.chunked_k_ctxp * (l_in as u64 + l_last) as f64 / 2.0 + high.chunked_b);
        let gap = (t_pre - t_chk).abs();
        if gap < best.0 {
            best = (gap, l_p as u32);
        }
    }
    best.1
}

#[test]
fn cronus_single_request() {
    let c = cfg(Policy::Cronus);
    let (l_in, out_len) = (3000u32, 4u32);
    let out = run(&c, &trace_of(&[(0.0, l_in, out_len)]), &RunOptions::verbose()).unwrap();
    let r = &out.report.records[0];
    let l_p = idle_split(&c.low_gpu, &c.high_gpu, l_in);
    assert_eq!(r.partial_prefill_len, Some(l_p));

    let mut t = prefill(&c.low_gpu, l_p);
    t += c.link.latency + l_p as f64 / c.link.bandwidth;
    let mut done = l_p;
    if done == l_in {
        t += iter(&c.high_gpu, 512, l_in as u64, 0);
    }
    while done < l_in {
        let chunk = (l_in - done).min(512);
        done += chunk;
        t += iter(&c.high_gpu, 512, done as u64, 0);
    }
    assert!(close(r.ttft, t), "{} vs {}", r.ttft, t);
    for e in 1..out_len {
        t += iter(&c.high_gpu, 512, 0, (l_in + e) as u64);
    }
    assert!(close(r.completion_time, t));
}

#[test]
fn cronus_whole_prompt_on_ppi_still_decodes_on_cpi() {
    let mut c = cfg(Policy::Cronus);
    c.high_gpu.kv_blocks_capacity = 100;
    // r0 reserves 94 of 100 blocks on the chunked instance; r1 needs 13.
    let trace = trace_of(&[(0.0, 1000, 500), (400.0, 200, 3)]);
    let out = run(&c, &trace, &RunOptions::verbose()).unwrap();
    let r1 = &out.report.records[1];
    assert_eq!(r1.partial_prefill_len, Some(200));
    let split = out.splits.iter().find(|s| s.request == 1).unwrap();
    assert!(split.decision.full_on_ppi);
    // It waits for r0 to free its blocks before reaching the chunked instance.
    assert!(r1.ttft + 400.0 > out.report.records[0].completion_time);
    for it in out.iterations.iter().filter(|i| i.instance == "ppi") {
        assert_eq!(it.decode_requests, 0);
    }
    assert!(out.violations.is_empty(), "{:?}", out.violations);
}

#[test]
fn dp_single_token_output() {
    let c = cfg(Policy::DpChunked);
    let out = run(&c, &trace_of(&[(0.0, 700, 1)]), &RunOptions::verbose()).unwrap();
    let r = &out.report.records[0];
    assert!(r.tbt_samples.is_empty());
    assert_eq!(r.assigned_instance.as_deref(), Some("dp-high"));
    let t = iter(&c.high_gpu, 512, 512, 0) + iter(&c.high_gpu, 512, 700, 0);
    assert!(close(r.ttft, t));
    assert_eq!(r.completion_time, r.ttft);
}

#[test]
fn dp_weighted_cycle() {
    let c = cfg(Policy::DpChunked);
    let reqs: Vec<_> = (0..8).map(|_| (0.0, 64, 4)).collect();
    let out = run(&c, &trace_of(&reqs), &RunOptions::default()).unwrap();
    let on = |name: &str| {
        out.report
            .records
            .iter()
            .filter(|r| r.assigned_instance.as_deref() == Some(name))
            .count()
    };
    assert_eq!((on("dp-high"), on("dp-low")), (6, 2));
    let low: Vec<u64> = out
        .report
        .records
        .iter()
        .filter(|r| r.assigned_instance.as_deref() == Some("dp-low"))
        .map(|r| r.id)
        .collect();
    assert_eq!(low, vec![3, 7]);
}

#[test]
fn dp_low_cap_holds_at_frontend() {
    let c = cfg(Policy::DpChunked);
    // Four long prompts at once: r3 fills the low slot; nothing spills.
    let reqs: Vec<_> = (0..12).map(|_| (0.0, 4000, 2)).collect();
    let out = run(&c, &trace_of(&reqs), &RunOptions::verbose()).unwrap();
    for r in &out.report.records {
        let expect = if r.id % 4 == 3 { "dp-low" } else { "dp-high" };
        assert_eq!(r.assigned_instance.as_deref(), Some(expect), "request {}", r.id);
    }
    assert!(out.violations.is_empty(), "{:?}", out.violations);
}

#[test]
fn pp_pays_comm_per_chunk() {
    let c = cfg(Policy::PpChunked);
    let out = run(&c, &trace_of(&[(0.0, 2048, 2)]), &RunOptions::verbose()).unwrap();
    let r = &out.report.records[0];
    let chunks = 4.0;
    assert!(r.ttft >= chunks * c.pp_comm_ms);
}

#[test]
fn pp_degenerate_matches_single_gpu() {
    let mut c = cfg(Policy::PpChunked);
    c.low_gpu = GpuProfile {
        name: "twin".into(),
        ..c.high_gpu.clone()
    };
    c.pp_layers_high = 16;
    c.pp_layers_low = 16;
    c.pp_comm_ms = 0.0;
    let trace = trace_of(&[(0.0, 1500, 3)]);
    let pp = run(&c, &trace, &RunOptions::default()).unwrap();
    let dp = run(&c.with_policy(Policy::DpChunked), &trace, &RunOptions::default()).unwrap();
    let (a, b) = (&pp.report.records[0], &dp.report.records[0]);
    assert!((a.ttft - b.ttft).abs() < 1e-9, "{} vs {}", a.ttft, b.ttft);
    assert!((a.completion_time - b.completion_time).abs() < 1e-9);
}

#[test]
fn pp_split_balances_stages() {
    let c = cfg(Policy::PpChunked);
    let out = run(&c, &trace_of(&[(0.0, 4096, 8)]), &RunOptions::verbose()).unwrap();
    let stage = |n: &str| -> f64 {
        out.iterations
            .iter()
            .filter(|i| i.instance == n)
            .map(|i| i.end - i.start - c.pp_comm_ms)
            .sum()
    };
    let ratio = stage("pp-stage0") / stage("pp-stage1");
    assert!((0.8..1.25).contains(&ratio), "stage ratio {ratio}");
}

#[test]
fn role_purity() {
    let trace = trace_of(&[(0.0, 900, 20), (5.0, 3000, 7), (9.0, 40, 60), (30.0, 1200, 1)]);
    for policy in [Policy::Cronus, Policy::DisaggHighLow, Policy::DisaggLowHigh] {
        let out = run(&cfg(policy), &trace, &RunOptions::verbose()).unwrap();
        for it in &out.iterations {
            match it.instance.as_str() {
                "ppi" | "prefill" => assert_eq!(it.decode_requests, 0, "{policy}"),
                "decode" => assert_eq!(it.prefill_tokens, 0, "{policy}"),
                _ => {}
            }
        }
        assert!(out.violations.is_empty(), "{policy}: {:?}", out.violations);
    }
}

#[test]
fn cronus_transfer_overlaps_cpi_work() {
    let reqs: Vec<_> = (0..40).map(|i| (i as f64 * 20.0, 1500, 64)).collect();
    let out = run(&cfg(Policy::Cronus), &trace_of(&reqs), &RunOptions::verbose()).unwrap();
    let overlapped = out.transfers.iter().any(|tr| {
        out.iterations
            .iter()
            .any(|it| it.instance == "cpi" && it.start < tr.end && tr.start < it.end)
    });
    assert!(overlapped);
    assert!(out.violations.is_empty(), "{:?}", out.violations);
}

#[test]
fn oversized_request_is_rejected_not_fatal() {
    let c = cfg(Policy::DisaggHighLow);
    let huge = (c.low_gpu.kv_blocks_capacity * 16 + 10) as u32;
    let out = run(&c, &trace_of(&[(0.0, 300, 4), (1.0, 64, huge)]), &RunOptions::verbose()).unwrap();
    assert_eq!(out.report.failed, vec![1]);
    assert_eq!(out.report.completed, 1);
    assert!(out.events.iter().any(|e| e.kind == LogKind::Rejected && e.request == Some(1)));
}

#[test]
fn event_log_is_time_ordered() {
    let reqs: Vec<_> = (0..30).map(|i| ((i % 7) as f64 * 13.0, 100 + i * 37, 1 + i % 9)).collect();
    for policy in Policy::ALL {
        let out = run(&cfg(policy), &trace_of(&reqs), &RunOptions::verbose()).unwrap();
        let arrivals = out.events.iter().filter(|e| e.kind == LogKind::Arrival).count();
        assert_eq!(arrivals, 30);
        let completions = out.events.iter().filter(|e| e.kind == LogKind::Completion).count();
        assert_eq!(completions, 30, "{policy}");
    }
}

#[test]
fn runs_are_deterministic() {
    let reqs: Vec<_> = (0..50).map(|i| (i as f64 * 3.0, 50 + (i * 97) % 2000, 1 + (i * 31) % 200)).collect();
    let trace = trace_of(&reqs);
    for policy in Policy::ALL {
        let a = run(&cfg(policy), &trace, &RunOptions::default()).unwrap().report.to_json();
        let b = run(&cfg(policy), &trace, &RunOptions::default()).unwrap().report.to_json();
        assert_eq!(a, b, "{policy}");
    }
}

#[test]
fn invalid_config_is_reported() {
    let mut c = cfg(Policy::Cronus);
    c.link.bandwidth = 0.0;
    let err = run(&c, &trace_of(&[(0.0, 10, 2)]), &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("link bandwidth must be positive"));
}
