//! Wiring of the five scheduling strategies onto engine instances.
//!
//! Each `bind_*` function turns a [`ClusterConfig`] into a [`Topology`]: the
//! instances that exist, which GPU each one runs on, its token budget and KV
//! capacity, and the frontend rule that routes arriving requests.

use serde::{Deserialize, Serialize};

use crate::model::{ClusterConfig, GpuProfile, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gpu {
    High,
    Low,
}

impl Gpu {
    pub fn as_str(self) -> &'static str {
        match self {
            Gpu::High => "high",
            Gpu::Low => "low",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Partial prefill on the low-end GPU, one request at a time.
    Ppi,
    /// Chunked prefill of prompt remainders plus all decode.
    Cpi,
    /// Whole-prompt prefill, one request at a time.
    PurePrefill,
    /// Continuous-batching decode of transferred requests.
    PureDecode,
    PpStage(u8),
    DpEngine(u8),
}

impl Role {
    /// Serial instances run unchunked prefills back to back.
    pub fn is_serial(self) -> bool {
        matches!(self, Role::Ppi | Role::PurePrefill)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub name: String,
    pub role: Role,
    pub gpu: Gpu,
    /// Profile with the chunked intercept rescaled to `budget`.
    pub profile: GpuProfile,
    pub budget: u32,
    pub kv_capacity_blocks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub layers: [u32; 2],
    pub total_layers: u32,
    pub comm_ms: f64,
    /// Virtual engines (micro-batches) in flight.
    pub micro_batches: usize,
    /// KV blocks available to each micro-batch on each stage.
    pub kv_blocks_per_micro_batch: [u64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Frontend {
    /// Hold requests until the partial-prefill queue is empty, split with
    /// the balancer, dispatch to the partial-prefill instance.
    Balancer {
        ppi: usize,
        cpi: usize,
        max_inflight: u32,
    },
    /// Weighted round robin over engines with per-engine waiting-queue caps.
    /// A request whose slot is capped waits at the frontend.
    WeightedRoundRobin { cycle: Vec<usize>, caps: Vec<u32> },
    /// Whole-prompt prefill on `prefill`, KV shipped to `decode`.
    Disaggregated { prefill: usize, decode: usize },
    /// Two-stage pipeline; requests go to the least-loaded micro-batch.
    Pipeline,
    /// Every request goes straight to one instance. Used to measure an
    /// instance's standalone capacity; with `prefilled` the requests arrive
    /// with their prompt already cached and first token emitted.
    Direct { unit: usize, prefilled: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub policy: Policy,
    pub instances: Vec<InstanceSpec>,
    pub frontend: Frontend,
    /// TTFT is stamped after the KV handoff rather than at prefill end.
    pub ttft_includes_transfer: bool,
    pub pipeline: Option<PipelineSpec>,
}

pub fn bind(cfg: &ClusterConfig) -> Topology {
    match cfg.policy {
        Policy::Cronus => bind_cronus(cfg),
        Policy::DpChunked => bind_dp(cfg),
        Policy::PpChunked => bind_pp(cfg),
        Policy::DisaggHighLow => bind_disagg(cfg, Direction::HighLow),
        Policy::DisaggLowHigh => bind_disagg(cfg, Direction::LowHigh),
    }
}

fn serial(name: &str, role: Role, gpu: Gpu, profile: &GpuProfile) -> InstanceSpec {
    InstanceSpec {
        name: name.into(),
        role,
        gpu,
        profile: profile.clone(),
        budget: u32::MAX,
        kv_capacity_blocks: profile.kv_blocks_capacity,
    }
}

fn chunked(name: &str, role: Role, gpu: Gpu, profile: &GpuProfile, budget: u32) -> InstanceSpec {
    InstanceSpec {
        name: name.into(),
        role,
        gpu,
        profile: profile.at_budget(budget),
        budget,
        kv_capacity_blocks: profile.kv_blocks_capacity,
    }
}

pub fn bind_cronus(cfg: &ClusterConfig) -> Topology {
    Topology {
        policy: Policy::Cronus,
        instances: vec![
            serial("ppi", Role::Ppi, Gpu::Low, &cfg.low_gpu),
            chunked("cpi", Role::Cpi, Gpu::High, &cfg.high_gpu, cfg.max_batched_tokens_high),
        ],
        frontend: Frontend::Balancer {
            ppi: 0,
            cpi: 1,
            max_inflight: cfg.ppi_max_inflight,
        },
        ttft_includes_transfer: false,
        pipeline: None,
    }
}

pub fn bind_dp(cfg: &ClusterConfig) -> Topology {
    let instances = vec![
        chunked("dp-high", Role::DpEngine(0), Gpu::High, &cfg.high_gpu, cfg.max_batched_tokens_high),
        chunked("dp-low", Role::DpEngine(1), Gpu::Low, &cfg.low_gpu, cfg.max_batched_tokens_low),
    ];
    let mut cycle = vec![0; cfg.dp_weight_high as usize];
    cycle.extend(std::iter::repeat_n(1, cfg.dp_weight_low as usize));
    Topology {
        policy: Policy::DpChunked,
        instances,
        frontend: Frontend::WeightedRoundRobin {
            cycle,
            caps: vec![cfg.dp_queue_cap_high, cfg.dp_queue_cap_low],
        },
        ttft_includes_transfer: false,
        pipeline: None,
    }
}

/// Per-stage KV blocks for one micro-batch. A stage holding `layers` of
/// `total` layers stores proportionally less KV per token, and the stage's
/// cache is divided evenly between the micro-batches.
pub fn pp_stage_blocks(profile: &GpuProfile, layers: u32, total: u32, micro_batches: usize) -> u64 {
    let stage = profile.kv_blocks_capacity as u128 * total as u128 / layers.max(1) as u128;
    (stage / micro_batches as u128) as u64
}

pub fn bind_pp(cfg: &ClusterConfig) -> Topology {
    let micro_batches = 2;
    let total = cfg.high_gpu.total_layers;
    let b = cfg.max_batched_tokens_high;
    let spec = PipelineSpec {
        layers: [cfg.pp_layers_high, cfg.pp_layers_low],
        total_layers: total,
        comm_ms: cfg.pp_comm_ms,
        micro_batches,
        kv_blocks_per_micro_batch: [
            pp_stage_blocks(&cfg.high_gpu, cfg.pp_layers_high, total, micro_batches),
            pp_stage_blocks(&cfg.low_gpu, cfg.pp_layers_low, total, micro_batches),
        ],
    };
    let mut s0 = chunked("pp-stage0", Role::PpStage(0), Gpu::High, &cfg.high_gpu, b);
    let mut s1 = chunked("pp-stage1", Role::PpStage(1), Gpu::Low, &cfg.low_gpu, b);
    s0.kv_capacity_blocks = spec.kv_blocks_per_micro_batch[0] * micro_batches as u64;
    s1.kv_capacity_blocks = spec.kv_blocks_per_micro_batch[1] * micro_batches as u64;
    Topology {
        policy: Policy::PpChunked,
        instances: vec![s0, s1],
        frontend: Frontend::Pipeline,
        ttft_includes_transfer: false,
        pipeline: Some(spec),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Prefill on the high-end GPU, decode on the low-end GPU.
    HighLow,
    /// Prefill on the low-end GPU, decode on the high-end GPU.
    LowHigh,
}

pub fn bind_disagg(cfg: &ClusterConfig, direction: Direction) -> Topology {
    let (policy, pre_gpu, pre, dec_gpu, dec) = match direction {
        Direction::HighLow => (Policy::DisaggHighLow, Gpu::High, &cfg.high_gpu, Gpu::Low, &cfg.low_gpu),
        Direction::LowHigh => (Policy::DisaggLowHigh, Gpu::Low, &cfg.low_gpu, Gpu::High, &cfg.high_gpu),
    };
    Topology {
        policy,
        instances: vec![
            serial("prefill", Role::PurePrefill, pre_gpu, pre),
            chunked("decode", Role::PureDecode, dec_gpu, dec, cfg.max_batched_tokens_high),
        ],
        frontend: Frontend::Disaggregated { prefill: 0, decode: 1 },
        ttft_includes_transfer: true,
        pipeline: None,
    }
}

/// Layer split proportional to compute weight, each stage keeping at least
/// one layer.
pub fn proportional_split(total_layers: u32, high_tflops: f64, low_tflops: f64) -> (u32, u32) {
    let share = high_tflops / (high_tflops + low_tflops);
    let high = ((total_layers as f64 * share).round() as u32).clamp(1, total_layers - 1);
    (high, total_layers - high)
}
