//! Domain types and cluster configuration.
//!
//! A [`ClusterConfig`] describes one high-end and one low-end GPU, the link
//! between them, the scheduling policy and its batching knobs. The on-disk
//! form is TOML restricted to flat dotted keys (`high_gpu.prefill_k = 0.06`);
//! [`ClusterConfig::to_flat_string`] writes that canonical form and
//! [`ClusterConfig::from_toml_str`] reads it back.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error};

/// One inference job from a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    /// Milliseconds since the start of the trace.
    pub arrival_time: f64,
    pub input_len: u32,
    pub output_len: u32,
}

impl Request {
    /// Tokens resident in the KV cache once the last output token has been
    /// produced. The final token itself is never fed back, hence the `- 1`.
    pub fn peak_kv_tokens(&self) -> u64 {
        self.input_len as u64 + self.output_len as u64 - 1
    }
}

/// Per-request outcome of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_time: f64,
    pub input_len: u32,
    pub output_len: u32,
    /// Arrival to first token, ms.
    pub ttft: f64,
    /// Gaps between consecutive output tokens, ms.
    pub tbt_samples: Vec<f64>,
    /// Absolute time of the last token, ms.
    pub completion_time: f64,
    /// Tokens prefilled on the low-end GPU (partial-prefill policy only).
    pub partial_prefill_len: Option<u32>,
    /// Engine the request was routed to (data-parallel policy only).
    pub assigned_instance: Option<String>,
}

/// Cost-model coefficients and memory limits for one GPU running the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuProfile {
    pub name: String,
    pub kv_blocks_capacity: u64,
    #[serde(default = "default_block_size")]
    pub kv_block_size: u32,
    /// ms per prompt token for an unchunked prefill.
    pub prefill_k: f64,
    /// ms fixed cost of an unchunked prefill.
    pub prefill_b: f64,
    /// ms per token of prefill context in a chunked iteration.
    pub chunked_k_ctxp: f64,
    /// ms per token of decode context in a chunked iteration.
    pub chunked_k_ctxd: f64,
    /// ms fixed cost of a chunked iteration at `chunked_ref_tokens`.
    pub chunked_b: f64,
    /// Token budget the chunked coefficients were profiled at.
    #[serde(default = "default_ref_tokens")]
    pub chunked_ref_tokens: u32,
    pub total_layers: u32,
    pub bf16_tflops: f64,
}

fn default_block_size() -> u32 {
    16
}

fn default_ref_tokens() -> u32 {
    512
}

impl GpuProfile {
    /// Profile for an engine that batches `budget` tokens per iteration.
    ///
    /// The chunked intercept is dominated by the MLP, whose cost is linear in
    /// the number of batched tokens, so it is rescaled from the profiled
    /// budget. Everything else is unchanged.
    pub fn at_budget(&self, budget: u32) -> GpuProfile {
        let mut p = self.clone();
        if budget != self.chunked_ref_tokens {
            p.chunked_b = self.chunked_b * budget as f64 / self.chunked_ref_tokens as f64;
            p.chunked_ref_tokens = budget;
        }
        p
    }

    pub fn kv_token_capacity(&self) -> u64 {
        self.kv_blocks_capacity * self.kv_block_size as u64
    }

    /// Blocks needed to hold `tokens` tokens.
    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.kv_block_size as u64)
    }
}

/// Parametric point-to-point link used for KV cache handoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    /// Tokens of KV cache per ms.
    pub bandwidth: f64,
    /// Fixed per-transfer overhead, ms.
    pub latency: f64,
    #[serde(default = "default_kv_cost")]
    pub kv_cost_per_token: f64,
}

fn default_kv_cost() -> f64 {
    1.0
}

impl LinkModel {
    pub fn transfer_time(&self, tokens: u64) -> f64 {
        self.latency + self.kv_cost_per_token * tokens as f64 / self.bandwidth
    }
}

impl Default for LinkModel {
    fn default() -> Self {
        // ~100 Gbps with 128 KiB of KV per token.
        LinkModel {
            bandwidth: 100.0,
            latency: 0.5,
            kv_cost_per_token: 1.0,
        }
    }
}

/// Scheduling strategy for the two-GPU cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "cronus")]
    Cronus,
    #[serde(rename = "dp")]
    DpChunked,
    #[serde(rename = "pp")]
    PpChunked,
    #[serde(rename = "disagg-hl")]
    DisaggHighLow,
    #[serde(rename = "disagg-lh")]
    DisaggLowHigh,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Cronus,
        Policy::DpChunked,
        Policy::PpChunked,
        Policy::DisaggHighLow,
        Policy::DisaggLowHigh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Cronus => "cronus",
            Policy::DpChunked => "dp",
            Policy::PpChunked => "pp",
            Policy::DisaggHighLow => "disagg-hl",
            Policy::DisaggLowHigh => "disagg-lh",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownPolicy(s.to_string()))
    }
}

/// Full description of one simulated deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub high_gpu: GpuProfile,
    pub low_gpu: GpuProfile,
    #[serde(default)]
    pub link: LinkModel,
    pub policy: Policy,
    #[serde(default = "d_512")]
    pub max_batched_tokens_high: u32,
    #[serde(default = "d_256")]
    pub max_batched_tokens_low: u32,
    #[serde(default = "d_3")]
    pub dp_weight_high: u32,
    #[serde(default = "d_1")]
    pub dp_weight_low: u32,
    #[serde(default = "d_3")]
    pub dp_queue_cap_high: u32,
    #[serde(default = "d_1")]
    pub dp_queue_cap_low: u32,
    pub pp_layers_high: u32,
    pub pp_layers_low: u32,
    #[serde(default)]
    pub pp_comm_ms: f64,
    #[serde(default = "d_2")]
    pub ppi_max_inflight: u32,
    #[serde(default)]
    pub seed: u64,
}

fn d_512() -> u32 {
    512
}
fn d_256() -> u32 {
    256
}
fn d_3() -> u32 {
    3
}
fn d_2() -> u32 {
    2
}
fn d_1() -> u32 {
    1
}

impl ClusterConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Canonical flat `key = value` form, one field per line.
    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "policy = \"{}\"", self.policy);
        for (prefix, gpu) in [("high_gpu", &self.high_gpu), ("low_gpu", &self.low_gpu)] {
            write_profile(&mut out, prefix, gpu);
        }
        let l = &self.link;
        let _ = writeln!(out, "link.bandwidth = {}", fmt_f64(l.bandwidth));
        let _ = writeln!(out, "link.latency = {}", fmt_f64(l.latency));
        let _ = writeln!(out, "link.kv_cost_per_token = {}", fmt_f64(l.kv_cost_per_token));
        let ints = [
            ("max_batched_tokens_high", self.max_batched_tokens_high),
            ("max_batched_tokens_low", self.max_batched_tokens_low),
            ("dp_weight_high", self.dp_weight_high),
            ("dp_weight_low", self.dp_weight_low),
            ("dp_queue_cap_high", self.dp_queue_cap_high),
            ("dp_queue_cap_low", self.dp_queue_cap_low),
            ("pp_layers_high", self.pp_layers_high),
            ("pp_layers_low", self.pp_layers_low),
        ];
        for (k, v) in ints {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "pp_comm_ms = {}", fmt_f64(self.pp_comm_ms));
        let _ = writeln!(out, "ppi_max_inflight = {}", self.ppi_max_inflight);
        let _ = writeln!(out, "seed = {}", self.seed);
        out
    }

    pub fn with_policy(&self, policy: Policy) -> ClusterConfig {
        ClusterConfig {
            policy,
            ..self.clone()
        }
    }
}

fn write_profile(out: &mut String, prefix: &str, g: &GpuProfile) {
    let _ = writeln!(out, "{prefix}.name = {:?}", g.name);
    let _ = writeln!(out, "{prefix}.kv_blocks_capacity = {}", g.kv_blocks_capacity);
    let _ = writeln!(out, "{prefix}.kv_block_size = {}", g.kv_block_size);
    let floats = [
        ("prefill_k", g.prefill_k),
        ("prefill_b", g.prefill_b),
        ("chunked_k_ctxp", g.chunked_k_ctxp),
        ("chunked_k_ctxd", g.chunked_k_ctxd),
        ("chunked_b", g.chunked_b),
    ];
    for (k, v) in floats {
        let _ = writeln!(out, "{prefix}.{k} = {}", fmt_f64(v));
    }
    let _ = writeln!(out, "{prefix}.chunked_ref_tokens = {}", g.chunked_ref_tokens);
    let _ = writeln!(out, "{prefix}.total_layers = {}", g.total_layers);
    let _ = writeln!(out, "{prefix}.bf16_tflops = {}", fmt_f64(g.bf16_tflops));
}

/// Shortest round-tripping float text that TOML still reads as a float.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E', 'n', 'i']) {
        s
    } else {
        format!("{s}.0")
    }
}

/// Checks every invariant of `cfg`, returning all violations at once.
pub fn validate_config(cfg: &ClusterConfig) -> Result<(), Vec<ConfigIssue>> {
    let mut issues = Vec::new();
    let mut push = |field: &str, message: &str| {
        issues.push(ConfigIssue {
            field: field.to_string(),
            message: message.to_string(),
        })
    };

    for (prefix, g) in [("high_gpu", &cfg.high_gpu), ("low_gpu", &cfg.low_gpu)] {
        let coeffs = [
            ("prefill_k", g.prefill_k),
            ("prefill_b", g.prefill_b),
            ("chunked_k_ctxp", g.chunked_k_ctxp),
            ("chunked_k_ctxd", g.chunked_k_ctxd),
            ("chunked_b", g.chunked_b),
        ];
        for (k, v) in coeffs {
            if !(v.is_finite() && v >= 0.0) {
                push(&format!("{prefix}.{k}"), "coefficient must be finite and non-negative");
            }
        }
        if g.kv_blocks_capacity < 1 {
            push(&format!("{prefix}.kv_blocks_capacity"), "must be at least 1");
        }
        if g.kv_block_size < 1 {
            push(&format!("{prefix}.kv_block_size"), "must be at least 1");
        }
        if g.chunked_ref_tokens < 1 {
            push(&format!("{prefix}.chunked_ref_tokens"), "must be at least 1");
        }
        if g.total_layers < 1 {
            push(&format!("{prefix}.total_layers"), "must be at least 1");
        }
        if !(g.bf16_tflops.is_finite() && g.bf16_tflops > 0.0) {
            push(&format!("{prefix}.bf16_tflops"), "must be positive");
        }
    }

    if !(cfg.link.bandwidth.is_finite() && cfg.link.bandwidth > 0.0) {
        push("link.bandwidth", "link bandwidth must be positive");
    }
    if !(cfg.link.latency.is_finite() && cfg.link.latency >= 0.0) {
        push("link.latency", "link latency must be non-negative");
    }
    if !(cfg.link.kv_cost_per_token.is_finite() && cfg.link.kv_cost_per_token >= 0.0) {
        push("link.kv_cost_per_token", "must be non-negative");
    }

    if cfg.max_batched_tokens_high < 1 {
        push("max_batched_tokens_high", "must be at least 1");
    }
    if cfg.max_batched_tokens_low < 1 {
        push("max_batched_tokens_low", "must be at least 1");
    }
    if cfg.dp_weight_high + cfg.dp_weight_low == 0 {
        push("dp_weight_high", "at least one data-parallel weight must be positive");
    }
    if cfg.dp_queue_cap_high < 1 {
        push("dp_queue_cap_high", "must be at least 1");
    }
    if cfg.dp_queue_cap_low < 1 {
        push("dp_queue_cap_low", "must be at least 1");
    }

    if cfg.high_gpu.total_layers != cfg.low_gpu.total_layers {
        push("low_gpu.total_layers", "both GPUs must run the same model");
    }
    if cfg.pp_layers_high + cfg.pp_layers_low != cfg.high_gpu.total_layers {
        push(
            "pp_layers_high",
            &format!(
                "layer split mismatch: {} + {} != {}",
                cfg.pp_layers_high, cfg.pp_layers_low, cfg.high_gpu.total_layers
            ),
        );
    }
    if cfg.pp_layers_high < 1 || cfg.pp_layers_low < 1 {
        push("pp_layers_low", "each pipeline stage needs at least one layer");
    }
    if !(cfg.pp_comm_ms.is_finite() && cfg.pp_comm_ms >= 0.0) {
        push("pp_comm_ms", "must be non-negative");
    }
    if cfg.ppi_max_inflight < 1 {
        push("ppi_max_inflight", "must be at least 1");
    }

    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn messages(cfg: &ClusterConfig) -> Vec<String> {
        validate_config(cfg)
            .err()
            .unwrap_or_default()
            .into_iter()
            .map(|i| i.to_string())
            .collect()
    }

    #[test]
    fn default_split_is_valid() {
        let cfg = presets::a100_a10_llama8b();
        assert_eq!(cfg.pp_layers_high + cfg.pp_layers_low, 32);
        assert!(validate_config(&cfg).is_ok());
    }

    #[test]
    fn layer_split_mismatch() {
        let mut cfg = presets::a100_a10_llama8b();
        cfg.high_gpu.total_layers = 28;
        cfg.low_gpu.total_layers = 28;
        let msgs = messages(&cfg);
        assert!(msgs.iter().any(|m| m.contains("layer split mismatch")), "{msgs:?}");
    }

    #[test]
    fn zero_bandwidth_rejected() {
        let mut cfg = presets::a100_a10_llama8b();
        cfg.link.bandwidth = 0.0;
        let msgs = messages(&cfg);
        assert!(msgs.iter().any(|m| m.contains("link bandwidth must be positive")));
    }

    #[test]
    fn reports_every_violation() {
        let mut cfg = presets::a100_a10_llama8b();
        cfg.link.bandwidth = -1.0;
        cfg.high_gpu.prefill_k = -0.1;
        cfg.low_gpu.kv_blocks_capacity = 0;
        let issues = validate_config(&cfg).unwrap_err();
        let fields: Vec<_> = issues.iter().map(|i| i.field.as_str()).collect();
        assert!(fields.contains(&"link.bandwidth"));
        assert!(fields.contains(&"high_gpu.prefill_k"));
        assert!(fields.contains(&"low_gpu.kv_blocks_capacity"));
    }

    #[test]
    fn flat_text_round_trips() {
        for cfg in [presets::a100_a10_llama8b(), presets::a100_a30_qwen7b()] {
            let text = cfg.to_flat_string();
            assert!(!text.contains('['), "flat form must not use tables");
            let back = ClusterConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let mut text = presets::a100_a10_llama8b().to_flat_string();
        text.push_str("bogus_knob = 3\n");
        assert!(ClusterConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn policy_names() {
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert!("fastest".parse::<Policy>().is_err());
    }

    #[test]
    fn budget_rescales_intercept_only() {
        let g = presets::a100_a10_llama8b().low_gpu;
        let half = g.at_budget(g.chunked_ref_tokens / 2);
        assert!((half.chunked_b - g.chunked_b / 2.0).abs() < 1e-12);
        assert_eq!(half.chunked_k_ctxp, g.chunked_k_ctxp);
        assert_eq!(g.at_budget(g.chunked_ref_tokens), g);
    }

    #[test]
    fn transfer_time_formula() {
        let link = LinkModel {
            bandwidth: 50.0,
            latency: 2.0,
            kv_cost_per_token: 0.5,
        };
        assert_eq!(link.transfer_time(1000), 2.0 + 0.5 * 1000.0 / 50.0);
    }
}
