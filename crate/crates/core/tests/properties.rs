use proptest::prelude::*;

use hetsim::engine::{run, RunOptions};
use hetsim::sweep::{compare_policies, Execution};
use hetsim::trace::{load_trace, save_trace, synth_trace, ArrivalMode, SynthParams};
use hetsim::{presets, Policy, Request, Trace};

fn requests() -> impl Strategy<Value = Vec<Request>> {
    prop::collection::vec((0u32..2000, 1u32..5000, 1u32..300), 1..16).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (t, input_len, output_len))| Request {
                id: i as u64,
                arrival_time: t as f64,
                input_len,
                output_len,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn every_policy_conserves_tokens(reqs in requests(), tight in any::<bool>()) {
        let trace = Trace::new("p", reqs).unwrap();
        let mut cfg = presets::a100_a30_qwen7b();
        if tight {
            cfg.high_gpu.kv_blocks_capacity = 900;
            cfg.low_gpu.kv_blocks_capacity = 500;
        }
        for policy in Policy::ALL {
            let out = run(&cfg.with_policy(policy), &trace, &RunOptions::verbose()).unwrap();
            prop_assert!(out.violations.is_empty(), "{policy}: {:?}", out.violations);
            prop_assert_eq!(out.report.completed + out.report.failed.len(), trace.len());
            for r in &out.report.records {
                prop_assert_eq!(r.tbt_samples.len() + 1, r.output_len as usize);
                prop_assert!(r.completion_time >= r.arrival_time + r.ttft);
            }
            for it in &out.iterations {
                prop_assert!(it.kv_blocks_used <= it.kv_blocks_capacity);
                if let Some(b) = it.token_budget {
                    prop_assert!(it.batched_tokens <= b);
                }
            }
        }
    }

    #[test]
    fn trace_text_round_trips(reqs in requests()) {
        let trace = Trace::new("rt", reqs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        save_trace(&trace, &path).unwrap();
        let back = load_trace(&path).unwrap();
        prop_assert_eq!(&back.requests, &trace.requests);
        prop_assert_eq!(back.content_hash(), trace.content_hash());
    }
}

#[test]
fn sequential_and_parallel_sweeps_agree() {
    let cfg = presets::a100_a10_llama8b();
    let trace = synth_trace(&SynthParams::new(150, 900.0, 100.0, ArrivalMode::FixedInterval(30.0), 5)).unwrap();
    let seq = compare_policies(&cfg, &Policy::ALL, &trace, Execution::Sequential);
    let par = compare_policies(&cfg, &Policy::ALL, &trace, Execution::Parallel);
    for (a, b) in seq.iter().zip(&par) {
        assert_eq!(a.as_ref().unwrap(), b.as_ref().unwrap());
    }
}

#[test]
fn both_presets_run_clean() {
    let trace = synth_trace(&SynthParams::new(200, 1014.0, 247.0, ArrivalMode::AllAtZero, 11)).unwrap();
    for cfg in [presets::a100_a10_llama8b(), presets::a100_a30_qwen7b()] {
        for policy in Policy::ALL {
            let out = run(&cfg.with_policy(policy), &trace, &RunOptions::default()).unwrap();
            assert!(out.violations.is_empty(), "{policy}: {:?}", out.violations);
            assert_eq!(out.report.completed, 200, "{policy}");
        }
    }
}
