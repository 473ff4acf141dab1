use thiserror::Error;

/// First point where a run disagrees with the shadow oracle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub ts: u64,
    pub what: String,
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "at ts {}: {}", self.ts, self.what)
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    Config(String),
    #[error("malformed trace at entry {index}: {reason}")]
    Trace { index: usize, reason: String },
    #[error("verification failed {0}")]
    Verification(Divergence),
    #[error(transparent)]
    Index(#[from] cubit::Error),
}
