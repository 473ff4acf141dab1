use parking_lot::RwLock;

use crate::delta::{RowId, Slot};
use crate::error::{Error, Result};
use crate::index::IndexConfig;
use crate::segmented::{ScopedExecutor, SegmentedBitvector};
use crate::stats::{CounterSnapshot, Counters};
use crate::traits::{BitmapIndex, Commit, Dictionary, Predicate, QueryResult, ResultBits, Value};
use crate::wah::BitOp;

use super::{build_bits, checked_dict, rows_per_segment, slot_at};

struct State {
    bits: Vec<SegmentedBitvector>,
    n_rows: u64,
    seq: u64,
    rows_per_segment: u64,
}

/// Bit matrix updated in place under one global reader-writer latch.
pub struct InPlaceIndex<V> {
    dict: Dictionary<V>,
    state: RwLock<State>,
    counters: Counters,
    exec: ScopedExecutor,
}

impl<V: Value> InPlaceIndex<V> {
    pub fn build(values: &[V], config: &IndexConfig) -> Result<Self> {
        Self::build_with_domain(values.iter().cloned(), values, config)
    }

    pub fn build_with_domain(domain: impl IntoIterator<Item = V>, values: &[V], config: &IndexConfig) -> Result<Self> {
        let dict = checked_dict(domain, config)?;
        let rps = rows_per_segment(config, values.len() as u64);
        let bits = build_bits(&dict, values, rps)?;
        Ok(InPlaceIndex {
            dict,
            state: RwLock::new(State {
                bits,
                n_rows: values.len() as u64,
                seq: 0,
                rows_per_segment: rps,
            }),
            counters: Counters::default(),
            exec: ScopedExecutor::new(config.query_lanes),
        })
    }

    fn write(&self) -> parking_lot::RwLockWriteGuard<'_, State> {
        let g = self.state.write();
        Counters::bump(&self.counters.latch_acquisitions);
        g
    }

    fn read(&self) -> parking_lot::RwLockReadGuard<'_, State> {
        let g = self.state.read();
        Counters::bump(&self.counters.shared_latch_acquisitions);
        g
    }

    fn current(st: &State, row: RowId) -> Result<Slot> {
        if row >= st.n_rows {
            return Err(Error::RowOutOfRange { row, n_rows: st.n_rows });
        }
        slot_at(&st.bits, row).ok_or(Error::NotFound(row))
    }

    fn flip(st: &mut State, slot: Slot, row: RowId) {
        let b = &mut st.bits[slot.index()];
        *b = b.flip_rows(&[row]).expect("row below the row count");
    }
}

impl<V: Value> BitmapIndex<V> for InPlaceIndex<V> {
    fn name(&self) -> &'static str {
        "inplace"
    }

    fn dictionary(&self) -> &Dictionary<V> {
        &self.dict
    }

    fn query(&self, pred: &Predicate<V>) -> Result<QueryResult> {
        let slots = self.dict.slots(pred)?;
        let st = self.read();
        Counters::bump(&self.counters.queries);
        let refs: Vec<&SegmentedBitvector> = slots.map(|s| &st.bits[s as usize - 1]).collect();
        let bits = SegmentedBitvector::combine_with(BitOp::Or, &refs, &self.exec, None)?;
        Ok(QueryResult {
            bits: ResultBits::Segmented(bits),
            start_ts: Some(st.seq),
        })
    }

    fn update(&self, row: RowId, value: &V) -> Result<Commit> {
        let new = self.dict.slot_of(value)?;
        let mut st = self.write();
        let cur = Self::current(&st, row)?;
        if cur == new {
            return Err(Error::SameValue(row));
        }
        Self::flip(&mut st, cur, row);
        Self::flip(&mut st, new, row);
        st.seq += 1;
        Counters::bump(&self.counters.udi_commits);
        Ok(Commit { ts: st.seq })
    }

    fn remove(&self, row: RowId) -> Result<Commit> {
        let mut st = self.write();
        let cur = Self::current(&st, row)?;
        Self::flip(&mut st, cur, row);
        st.seq += 1;
        Counters::bump(&self.counters.udi_commits);
        Ok(Commit { ts: st.seq })
    }

    fn insert(&self, value: &V) -> Result<(RowId, Commit)> {
        let s = self.dict.slot_of(value)?;
        let mut st = self.write();
        let row = st.n_rows;
        for (i, b) in st.bits.iter_mut().enumerate() {
            b.push_row(i == s.index());
        }
        st.n_rows += 1;
        st.seq += 1;
        Counters::bump(&self.counters.udi_commits);
        Ok((row, Commit { ts: st.seq }))
    }

    fn value_of(&self, row: RowId) -> Result<Option<V>> {
        let st = self.read();
        match Self::current(&st, row) {
            Ok(s) => Ok(Some(self.dict.value(s).clone())),
            Err(Error::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn row_count(&self) -> u64 {
        self.state.read().n_rows
    }

    fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }
}

impl<V> InPlaceIndex<V> {
    pub fn rows_per_segment(&self) -> u64 {
        self.state.read().rows_per_segment
    }
}
