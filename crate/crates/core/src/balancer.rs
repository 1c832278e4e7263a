//! Partial-prefill length selection.
//!
//! For each incoming prompt the balancer picks how many leading tokens the
//! low-end GPU prefills, so that this partial prefill takes about as long as
//! the chunked prefill of the remainder on the high-end GPU. Candidates are a
//! fixed grid of 512 evenly spaced lengths; the one with the smallest
//! absolute time gap wins, ties going to the smaller length.

use serde::{Deserialize, Serialize};

use crate::costmodel::prefill_time;
use crate::model::GpuProfile;

pub const GRID: u64 = 512;

/// Snapshot of the chunked-prefill instance taken at dispatch time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpiStats {
    /// Decode requests currently running.
    pub n_decode: u64,
    /// Sum of the decode requests' context lengths, tokens.
    pub decode_ctx_sum: u64,
    pub free_kv_blocks: u64,
    pub max_batched_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitDecision {
    pub partial_len: u32,
    /// 1-based index into the candidate grid; `None` when no search ran.
    pub candidate_index: Option<u32>,
    pub predicted_t_prefill: f64,
    pub predicted_t_chunked: f64,
    /// The chunked instance lacks blocks for the prompt, so all of it is
    /// prefilled on the low-end GPU.
    pub full_on_ppi: bool,
    /// Decode requests consume the whole token budget; no chunk budget left.
    pub saturated: bool,
}

/// One row of the candidate table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: u32,
    pub partial_len: u32,
    pub t_prefill: f64,
    pub t_chunked: f64,
}

impl Candidate {
    pub fn gap(&self) -> f64 {
        (self.t_prefill - self.t_chunked).abs()
    }
}

/// `ceil(i * input_len / 512)` for `i = 1..=512`.
pub fn candidate_lengths(input_len: u32) -> Vec<u32> {
    let l = input_len as u64;
    (1..=GRID).map(|i| (i * l).div_ceil(GRID) as u32).collect()
}

/// Predicted time for the chunked instance to finish the remainder of a
/// prompt whose first `partial_len` tokens arrive precomputed.
pub fn predicted_chunked_time(
    high: &GpuProfile,
    stats: &CpiStats,
    input_len: u32,
    partial_len: u32,
    chunk_budget: u64,
) -> f64 {
    let l_in = input_len as u64;
    let l_p = partial_len as u64;
    let remaining = l_in - l_p;
    let (n_iter, l_last) = if remaining == 0 {
        (1, l_in)
    } else {
        (
            remaining.div_ceil(chunk_budget),
            l_p + (remaining / chunk_budget) * chunk_budget,
        )
    };
    n_iter as f64
        * (high.chunked_k_ctxp * (l_in + l_last) as f64 / 2.0
            + high.chunked_k_ctxd * stats.decode_ctx_sum as f64
            + high.chunked_b)
}

/// Full candidate table, or `None` when decodes leave no chunk budget.
pub fn candidate_table(
    low: &GpuProfile,
    high: &GpuProfile,
    stats: &CpiStats,
    input_len: u32,
) -> Option<Vec<Candidate>> {
    let budget = stats.max_batched_tokens.checked_sub(stats.n_decode).filter(|&b| b > 0)?;
    Some(
        candidate_lengths(input_len)
            .into_iter()
            .enumerate()
            .map(|(i, l_p)| Candidate {
                index: i as u32 + 1,
                partial_len: l_p,
                t_prefill: prefill_time(low, l_p as u64),
                t_chunked: predicted_chunked_time(high, stats, input_len, l_p, budget),
            })
            .collect(),
    )
}

/// Chooses the partial prefill length for one request. `low` is the
/// partial-prefill GPU, `high` the chunked-prefill GPU.
pub fn choose_split(
    low: &GpuProfile,
    high: &GpuProfile,
    stats: &CpiStats,
    input_len: u32,
) -> SplitDecision {
    assert!(input_len >= 1, "input_len must be at least 1");
    let whole = |full_on_ppi, saturated| SplitDecision {
        partial_len: input_len,
        candidate_index: None,
        predicted_t_prefill: prefill_time(low, input_len as u64),
        predicted_t_chunked: 0.0,
        full_on_ppi,
        saturated,
    };

    if stats.free_kv_blocks < high.blocks_for(input_len as u64) {
        return whole(true, false);
    }
    let Some(table) = candidate_table(low, high, stats, input_len) else {
        return whole(false, true);
    };

    let mut best = table[0];
    for c in &table[1..] {
        if c.gap() < best.gap() {
            best = *c;
        }
    }
    SplitDecision {
        partial_len: best.partial_len,
        candidate_index: Some(best.index),
        predicted_t_prefill: best.t_prefill,
        predicted_t_chunked: best.t_chunked,
        full_on_ppi: false,
        saturated: false,
    }
}

/// Evaluates many independent split problems, in parallel when the
/// `parallel` feature is on.
pub fn choose_split_many(
    problems: &[(GpuProfile, GpuProfile, CpiStats, u32)],
    exec: crate::sweep::Execution,
) -> Vec<SplitDecision> {
    crate::sweep::map(exec, problems, |(low, high, stats, l)| {
        choose_split(low, high, stats, *l)
    })
}
