use std::fmt;

use thiserror::Error;

/// A single configuration invariant violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("invalid config: {}", join(.0))]
    InvalidConfig(Vec<ConfigIssue>),

    #[error("unknown policy {0:?} (expected cronus, dp, pp, disagg-hl or disagg-lh)")]
    UnknownPolicy(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("trace is empty")]
    EmptyTrace,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("percentile of an empty sample set")]
    EmptySamples,

    #[error("standalone throughput must be positive")]
    ZeroStandalone,

    #[error("simulation deadlocked at t={time_ms} ms with blocked requests {blocked:?}")]
    Deadlock { time_ms: f64, blocked: Vec<u64> },
}

fn join(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
