//! Workload generation, a multi-threaded driver, and a sequential shadow
//! oracle for checking bitmap index runs.

pub mod driver;
pub mod error;
pub mod oracle;
pub mod report;
pub mod workload;

pub use driver::{build_index, run, IndexKind, LatencySummary, RunConfig, RunStats};
pub use error::{BenchError, Divergence};
pub use oracle::{oracle_replay, Answer, QueryRecord, ShadowOracle, TraceEntry, TraceOp};
pub use workload::{generate, Distribution, Mix, ValueSampler, WorkloadSpec};
