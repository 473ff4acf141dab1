//! Latch-based baseline indexes behind the same [`BitmapIndex`](crate::BitmapIndex) API.
//!
//! - [`InPlaceIndex`]: one bit matrix updated directly under a global
//!   reader-writer latch.
//! - [`UcbIndex`]: append-only bitvectors plus an existence bitvector; an
//!   update deletes the physical row and appends a new one.
//! - [`UpBitIndex`]: a value bitvector and an update bitvector per value, each
//!   pair under its own reader-writer latch.

mod inplace;
mod ucb;
mod upbit;

pub use inplace::InPlaceIndex;
pub use ucb::UcbIndex;
pub use upbit::UpBitIndex;

use crate::delta::{RowId, Slot};
use crate::error::Result;
use crate::index::IndexConfig;
use crate::segmented::{default_rows_per_segment, SegmentedBitvector};
use crate::traits::{column_ones, Dictionary, Value};

pub(crate) fn rows_per_segment(config: &IndexConfig, n_rows: u64) -> u64 {
    config
        .rows_per_segment
        .unwrap_or_else(|| default_rows_per_segment(n_rows, config.segments, config.min_rows_per_segment))
}

pub(crate) fn build_bits<V: Value>(
    dict: &Dictionary<V>,
    values: &[V],
    rps: u64,
) -> Result<Vec<SegmentedBitvector>> {
    let n = values.len() as u64;
    column_ones(dict, values)?
        .iter()
        .map(|ones| SegmentedBitvector::from_sorted_ones(ones, n, rps))
        .collect()
}

pub(crate) fn checked_dict<V: Value>(
    domain: impl IntoIterator<Item = V>,
    config: &IndexConfig,
) -> Result<Dictionary<V>> {
    config.validate()?;
    let dict = Dictionary::new(domain);
    if dict.len() > config.cardinality {
        return Err(crate::Error::Config(format!(
            "{} distinct values exceed cardinality {}",
            dict.len(),
            config.cardinality
        )));
    }
    Ok(dict)
}

/// The slot whose bit is set at `row`, scanning every value.
pub(crate) fn slot_at(bits: &[SegmentedBitvector], row: RowId) -> Option<Slot> {
    bits.iter().position(|b| b.get(row)).map(Slot::from_index)
}
