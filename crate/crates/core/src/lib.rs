//! Discrete-event simulation of LLM serving on a two-GPU heterogeneous
//! cluster: one high-end and one low-end GPU joined by a link.
//!
//! Five deployment strategies are modelled: partial disaggregated prefill
//! ([`Policy::Cronus`]), data-parallel and pipeline-parallel chunked prefill,
//! and prefill/decode disaggregation in both directions. Execution times come
//! from linear cost models ([`costmodel`]); the partial-prefill split comes
//! from [`balancer`].

pub mod balancer;
pub mod costmodel;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod policies;
pub mod presets;
pub mod report;
pub mod sweep;
pub mod trace;

pub use engine::{run, RunOptions, SimOutcome};
pub use error::{Error, Result};
pub use metrics::RunReport;
pub use model::{ClusterConfig, GpuProfile, LinkModel, Policy, Request, RequestRecord};
pub use sweep::Execution;
pub use trace::Trace;
