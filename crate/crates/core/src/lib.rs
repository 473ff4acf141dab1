//! CUBIT: a concurrent updatable bitmap index.
//!
//! Values are equality-encoded into one WAH-compressed, segmented bitvector
//! per distinct value. Updates, deletes and inserts never touch those
//! bitvectors; each appends a row-wise delta (HUD) to a shared log, and readers
//! apply the deltas visible at their snapshot. Background merges fold deltas
//! into new bitvector versions, and old versions and log prefixes are freed
//! after a grace period.
//!
//! ```
//! use cubit::{CubitIndex, IndexConfig, Predicate};
//!
//! let idx = CubitIndex::build(&[10, 20, 10], IndexConfig::new(3)).unwrap();
//! idx.update(1, &10).unwrap();
//! let rows = idx.query(&Predicate::Eq(10)).unwrap().to_row_ids();
//! assert_eq!(rows, vec![0, 1, 2]);
//! ```

pub mod baselines;
pub mod delta;
pub mod error;
pub mod fault;
pub mod index;
pub mod maintenance;
pub mod reclaim;
pub mod segmented;
pub mod stats;
pub mod sync;
pub mod traits;
pub mod version;
pub mod wah;

pub use baselines::{InPlaceIndex, UcbIndex, UpBitIndex};
pub use delta::{hud_for_delete, hud_for_insert, hud_for_update, DeltaLog, Hud, HudSet, RowId, Slot, Ule, UleDraft, UleKind};
pub use error::{Error, Result};
pub use fault::{FaultPoint, Faults};
pub use index::{CubitIndex, IndexConfig, LogEntry, MergeOutcome, SnapshotGuard};
pub use maintenance::{run_maintenance, MaintenanceHandle, MaintenanceReport};
pub use reclaim::{Domain, Guard};
pub use segmented::{Executor, ScopedExecutor, SegmentedBitvector, SerialExecutor};
pub use stats::{AllocStats, CounterSnapshot};
pub use sync::{apply_descriptor, conflict_check, RedoEntry, SharedVar, SharedVarTarget, SyncVariant};
pub use traits::{BitmapIndex, Commit, Dictionary, Predicate, QueryResult, ResultBits, Value};
pub use version::{VersionChain, VersionedVb};
pub use wah::{BitOp, WahBitvector, WahWord};
