use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("malformed WAH stream: {0}")]
    Codec(String),
    #[error("bit {index} out of range for length {len}")]
    OutOfRange { index: u64, len: u64 },
    #[error("positions must be strictly ascending")]
    Unsorted,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("value not in the index domain: {0}")]
    Domain(String),
    #[error("row {row} out of range ({n_rows} rows)")]
    RowOutOfRange { row: u64, n_rows: u64 },
    #[error("row {0} holds no value")]
    NotFound(u64),
    #[error("row {0} already holds the requested value")]
    SameValue(u64),
    #[error("invalid HUD: {0}")]
    InvalidHud(String),
    #[error("stale install: chain head is already at ts {head_ts}, version has ts {ts}")]
    StaleInstall { ts: u64, head_ts: u64 },
}
