use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock, RwLockReadGuard};

use crate::delta::{RowId, Slot};
use crate::error::{Error, Result};
use crate::index::IndexConfig;
use crate::segmented::{ScopedExecutor, SegmentedBitvector};
use crate::stats::{CounterSnapshot, Counters};
use crate::traits::{BitmapIndex, Commit, Dictionary, Predicate, QueryResult, ResultBits, Value};
use crate::wah::BitOp;

use super::{build_bits, checked_dict, rows_per_segment};

/// Value bitvector and update bitvector; the value's rows are `vb ^ ub`.
/// Both always have the same length.
struct Pair {
    vb: SegmentedBitvector,
    ub: SegmentedBitvector,
}

impl Pair {
    fn bit(&self, row: RowId) -> bool {
        self.vb.get(row) ^ self.ub.get(row)
    }

    fn flip(&mut self, row: RowId) {
        if row >= self.ub.n_rows() {
            self.vb.extend_to(row + 1);
            self.ub.extend_to(row + 1);
        }
        self.ub = self.ub.flip_rows(&[row]).expect("row below length");
    }
}

/// Per-value `<VB, UB>` pairs, each under its own reader-writer latch.
/// Latches are always taken in ascending value order.
pub struct UpBitIndex<V> {
    dict: Dictionary<V>,
    pairs: Vec<RwLock<Pair>>,
    /// Serializes inserts, which allocate row ids.
    insert_latch: Mutex<()>,
    n_rows: AtomicU64,
    seq: AtomicU64,
    rps: u64,
    merge_threshold: u64,
    counters: Counters,
    exec: ScopedExecutor,
}

impl<V: Value> UpBitIndex<V> {
    pub fn build(values: &[V], config: &IndexConfig) -> Result<Self> {
        Self::build_with_domain(values.iter().cloned(), values, config)
    }

    pub fn build_with_domain(domain: impl IntoIterator<Item = V>, values: &[V], config: &IndexConfig) -> Result<Self> {
        let dict = checked_dict(domain, config)?;
        let n = values.len() as u64;
        let rps = rows_per_segment(config, n);
        let pairs = build_bits(&dict, values, rps)?
            .into_iter()
            .map(|vb| {
                Ok(RwLock::new(Pair {
                    vb,
                    ub: SegmentedBitvector::new(n, rps, false)?,
                }))
            })
            .collect::<Result<_>>()?;
        Ok(UpBitIndex {
            dict,
            pairs,
            insert_latch: Mutex::new(()),
            n_rows: AtomicU64::new(n),
            seq: AtomicU64::new(0),
            rps,
            merge_threshold: config.merge_threshold as u64,
            counters: Counters::default(),
            exec: ScopedExecutor::new(config.query_lanes),
        })
    }

    fn read_all(&self) -> Vec<RwLockReadGuard<'_, Pair>> {
        let gs: Vec<_> = self.pairs.iter().map(|p| p.read()).collect();
        Counters::add(&self.counters.shared_latch_acquisitions, gs.len() as u64);
        gs
    }

    fn current(&self, row: RowId) -> Result<Slot> {
        let n = self.n_rows.load(Ordering::Acquire);
        if row >= n {
            return Err(Error::RowOutOfRange { row, n_rows: n });
        }
        let gs = self.read_all();
        gs.iter()
            .position(|p| p.bit(row))
            .map(Slot::from_index)
            .ok_or(Error::NotFound(row))
    }

    /// Folds UB into VB when it has grown past the threshold.
    fn merge_pair(&self, s: usize) {
        let mut p = self.pairs[s].write();
        Counters::bump(&self.counters.latch_acquisitions);
        if p.ub.count_ones() <= self.merge_threshold {
            return;
        }
        let vb = SegmentedBitvector::combine_with(BitOp::Xor, &[&p.vb, &p.ub], &self.exec, None)
            .expect("pair halves share one shape");
        let n = vb.n_rows();
        p.vb = vb;
        p.ub = SegmentedBitvector::new(n, self.rps, false).expect("positive segment size");
        Counters::bump(&self.counters.merges_committed);
    }

    /// Flips `row` in the given values (ascending) if `expect` still holds it.
    fn commit(&self, row: RowId, expect: Slot, slots: &[Slot]) -> Option<u64> {
        let mut gs: Vec<_> = slots.iter().map(|s| self.pairs[s.index()].write()).collect();
        Counters::add(&self.counters.latch_acquisitions, gs.len() as u64);
        let held = slots.iter().position(|s| *s == expect).expect("expected value is locked");
        if !gs[held].bit(row) {
            return None;
        }
        for g in gs.iter_mut() {
            g.flip(row);
        }
        Some(self.seq.fetch_add(1, Ordering::AcqRel) + 1)
    }

    fn modify(&self, row: RowId, new: Option<Slot>) -> Result<Commit> {
        loop {
            let cur = self.current(row)?;
            let slots = match new {
                Some(s) if s == cur => return Err(Error::SameValue(row)),
                Some(s) if s < cur => vec![s, cur],
                Some(s) => vec![cur, s],
                None => vec![cur],
            };
            match self.commit(row, cur, &slots) {
                Some(ts) => {
                    Counters::bump(&self.counters.udi_commits);
                    return Ok(Commit { ts });
                }
                None => Counters::bump(&self.counters.restarts),
            }
        }
    }
}

impl<V: Value> BitmapIndex<V> for UpBitIndex<V> {
    fn name(&self) -> &'static str {
        "upbit"
    }

    fn dictionary(&self) -> &Dictionary<V> {
        &self.dict
    }

    fn query(&self, pred: &Predicate<V>) -> Result<QueryResult> {
        let slots = self.dict.slots(pred)?;
        let first = *slots.start() as usize - 1;
        let gs: Vec<_> = slots.map(|s| self.pairs[s as usize - 1].read()).collect();
        Counters::add(&self.counters.shared_latch_acquisitions, gs.len() as u64);
        Counters::bump(&self.counters.queries);
        let ts = self.seq.load(Ordering::Acquire);
        let n = gs
            .iter()
            .map(|p| p.vb.n_rows())
            .max()
            .unwrap_or(0)
            .max(self.n_rows.load(Ordering::Acquire));
        let mut parts = Vec::with_capacity(gs.len());
        let mut to_merge = Vec::new();
        for (i, p) in gs.iter().enumerate() {
            let ub_ones = p.ub.count_ones();
            if ub_ones > self.merge_threshold {
                to_merge.push(first + i);
            }
            let (vb, ub) = (p.vb.extended_to(n), p.ub.extended_to(n));
            parts.push(if ub_ones == 0 {
                vb
            } else {
                SegmentedBitvector::combine_with(BitOp::Xor, &[&vb, &ub], &self.exec, None)?
            });
        }
        drop(gs);
        let refs: Vec<&SegmentedBitvector> = parts.iter().collect();
        let bits = SegmentedBitvector::combine_with(BitOp::Or, &refs, &self.exec, None)?;
        for s in to_merge {
            self.merge_pair(s);
        }
        Ok(QueryResult {
            bits: ResultBits::Segmented(bits),
            start_ts: Some(ts),
        })
    }

    fn update(&self, row: RowId, value: &V) -> Result<Commit> {
        let s = self.dict.slot_of(value)?;
        self.modify(row, Some(s))
    }

    fn remove(&self, row: RowId) -> Result<Commit> {
        self.modify(row, None)
    }

    fn insert(&self, value: &V) -> Result<(RowId, Commit)> {
        let s = self.dict.slot_of(value)?;
        let _l = self.insert_latch.lock();
        Counters::bump(&self.counters.latch_acquisitions);
        let row = self.n_rows.load(Ordering::Acquire);
        let ts = {
            let mut p = self.pairs[s.index()].write();
            Counters::bump(&self.counters.latch_acquisitions);
            p.flip(row);
            self.seq.fetch_add(1, Ordering::AcqRel) + 1
        };
        // published only once the row's bit is in place
        self.n_rows.store(row + 1, Ordering::Release);
        Counters::bump(&self.counters.udi_commits);
        Ok((row, Commit { ts }))
    }

    fn value_of(&self, row: RowId) -> Result<Option<V>> {
        match self.current(row) {
            Ok(s) => Ok(Some(self.dict.value(s).clone())),
            Err(Error::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn row_count(&self) -> u64 {
        self.n_rows.load(Ordering::Acquire)
    }

    fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_on_read_folds_ub() {
        let cfg = IndexConfig::new(4).with_rows_per_segment(8).with_merge_threshold(2);
        let vals: Vec<u32> = vec![1; 10];
        let idx = UpBitIndex::build_with_domain([1, 2], &vals, &cfg).unwrap();
        for r in 0..3 {
            idx.update(r, &2).unwrap();
        }
        assert_eq!(idx.pairs[1].read().ub.count_ones(), 3);
        assert_eq!(idx.query(&Predicate::Eq(2)).unwrap().to_row_ids(), vec![0, 1, 2]);
        assert_eq!(idx.pairs[1].read().ub.count_ones(), 0);
        assert_eq!(idx.query(&Predicate::Eq(2)).unwrap().to_row_ids(), vec![0, 1, 2]);
        assert_eq!(idx.counters().merges_committed, 1);
    }
}
