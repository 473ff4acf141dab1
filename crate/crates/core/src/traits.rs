//! The API shared by CUBIT and the baseline indexes.

use std::fmt::Debug;
use std::hash::Hash;
use std::ops::RangeInclusive;

use crate::delta::{RowId, Slot};
use crate::error::{Error, Result};
use crate::segmented::SegmentedBitvector;
use crate::stats::CounterSnapshot;
use crate::wah::WahBitvector;

/// Bound for attribute values.
pub trait Value: Ord + Clone + Hash + Debug + Send + Sync + 'static {}
impl<T: Ord + Clone + Hash + Debug + Send + Sync + 'static> Value for T {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate<V> {
    Eq(V),
    /// Inclusive on both ends.
    Range(V, V),
}

/// Closed, ordered value domain. Slot `k` is the `k`-th smallest value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dictionary<V> {
    values: Vec<V>,
}

impl<V: Value> Dictionary<V> {
    pub fn new(values: impl IntoIterator<Item = V>) -> Self {
        let mut values: Vec<V> = values.into_iter().collect();
        values.sort();
        values.dedup();
        Dictionary { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn slot_of(&self, v: &V) -> Result<Slot> {
        self.values
            .binary_search(v)
            .map(Slot::from_index)
            .map_err(|_| Error::Domain(format!("{v:?}")))
    }

    pub fn value(&self, s: Slot) -> &V {
        &self.values[s.index()]
    }

    /// 1-based slot range selected by `pred`.
    pub fn slots(&self, pred: &Predicate<V>) -> Result<RangeInclusive<u32>> {
        match pred {
            Predicate::Eq(v) => {
                let s = self.slot_of(v)?.get();
                Ok(s..=s)
            }
            Predicate::Range(lo, hi) => {
                let (a, b) = (self.slot_of(lo)?, self.slot_of(hi)?);
                if a > b {
                    return Err(Error::Domain(format!("empty range {lo:?}..={hi:?}")));
                }
                Ok(a.get()..=b.get())
            }
        }
    }
}

/// Ordering stamp of a committed UDI. For CUBIT this is the Delta Log
/// timestamp; the baselines take a global sequence number inside their
/// critical section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Commit {
    pub ts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResultBits {
    Segmented(SegmentedBitvector),
    Plain(WahBitvector),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    pub bits: ResultBits,
    /// Commit stamp the answer is consistent with, when the index can name one:
    /// the result reflects exactly the UDIs with `ts <= start_ts`.
    pub start_ts: Option<u64>,
}

impl QueryResult {
    pub fn n_rows(&self) -> u64 {
        match &self.bits {
            ResultBits::Segmented(s) => s.n_rows(),
            ResultBits::Plain(p) => p.bit_len(),
        }
    }

    pub fn count_ones(&self) -> u64 {
        match &self.bits {
            ResultBits::Segmented(s) => s.count_ones(),
            ResultBits::Plain(p) => p.count_ones(),
        }
    }

    pub fn to_row_ids(&self) -> Vec<RowId> {
        match &self.bits {
            ResultBits::Segmented(s) => s.to_row_ids(),
            ResultBits::Plain(p) => p.to_row_ids(),
        }
    }

    pub fn get(&self, row: RowId) -> bool {
        match &self.bits {
            ResultBits::Segmented(s) => s.get(row),
            ResultBits::Plain(p) => p.get_or_zero(row),
        }
    }
}

/// Concurrent updatable bitmap index over values `V`.
pub trait BitmapIndex<V: Value>: Send + Sync {
    fn name(&self) -> &'static str;
    fn dictionary(&self) -> &Dictionary<V>;
    fn query(&self, pred: &Predicate<V>) -> Result<QueryResult>;
    fn update(&self, row: RowId, value: &V) -> Result<Commit>;
    fn remove(&self, row: RowId) -> Result<Commit>;
    fn insert(&self, value: &V) -> Result<(RowId, Commit)>;
    /// Current value of `row`, `None` once deleted.
    fn value_of(&self, row: RowId) -> Result<Option<V>>;
    fn row_count(&self) -> u64;
    fn counters(&self) -> CounterSnapshot;
}

/// Positions of set bits per slot, for building from a value column.
pub(crate) fn column_ones<V: Value>(dict: &Dictionary<V>, values: &[V]) -> Result<Vec<Vec<u64>>> {
    let mut ones = vec![Vec::new(); dict.len()];
    for (row, v) in values.iter().enumerate() {
        ones[dict.slot_of(v)?.index()].push(row as u64);
    }
    Ok(ones)
}
