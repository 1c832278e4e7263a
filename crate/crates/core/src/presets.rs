//! Built-in cluster configurations.

use crate::model::ClusterConfig;

pub const A100_A10_LLAMA8B: &str = include_str!("../configs/a100_a10_llama8b.toml");
pub const A100_A30_QWEN7B: &str = include_str!("../configs/a100_a30_qwen7b.toml");

pub const NAMES: [&str; 2] = ["a100_a10_llama8b", "a100_a30_qwen7b"];

pub fn a100_a10_llama8b() -> ClusterConfig {
    ClusterConfig::from_toml_str(A100_A10_LLAMA8B).expect("bundled preset parses")
}

pub fn a100_a30_qwen7b() -> ClusterConfig {
    ClusterConfig::from_toml_str(A100_A30_QWEN7B).expect("bundled preset parses")
}

pub fn by_name(name: &str) -> Option<ClusterConfig> {
    match name {
        "a100_a10_llama8b" => Some(a100_a10_llama8b()),
        "a100_a30_qwen7b" => Some(a100_a30_qwen7b()),
        _ => None,
    }
}
