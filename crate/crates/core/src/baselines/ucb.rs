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
    /// Per value, over physical rows.
    bits: Vec<SegmentedBitvector>,
    /// Existence bitvector over physical rows.
    eb: SegmentedBitvector,
    /// User row to physical row.
    phys: Vec<u64>,
    /// Physical row to user row.
    user: Vec<RowId>,
    seq: u64,
    rps: u64,
}

/// Update conscious bitmaps: updates invalidate the old physical row and
/// append a new one; an indirection map keeps user row ids stable.
pub struct UcbIndex<V> {
    dict: Dictionary<V>,
    state: RwLock<State>,
    counters: Counters,
    exec: ScopedExecutor,
}

impl<V: Value> UcbIndex<V> {
    pub fn build(values: &[V], config: &IndexConfig) -> Result<Self> {
        Self::build_with_domain(values.iter().cloned(), values, config)
    }

    pub fn build_with_domain(domain: impl IntoIterator<Item = V>, values: &[V], config: &IndexConfig) -> Result<Self> {
        let dict = checked_dict(domain, config)?;
        let n = values.len() as u64;
        let rps = rows_per_segment(config, n);
        let bits = build_bits(&dict, values, rps)?;
        Ok(UcbIndex {
            dict,
            state: RwLock::new(State {
                bits,
                eb: SegmentedBitvector::new(n, rps, true)?,
                phys: (0..n).collect(),
                user: (0..n).collect(),
                seq: 0,
                rps,
            }),
            counters: Counters::default(),
            exec: ScopedExecutor::new(config.query_lanes),
        })
    }

    /// Physical row count, which grows with every update.
    pub fn physical_rows(&self) -> u64 {
        self.state.read().eb.n_rows()
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

    /// Physical row and value of a live user row.
    fn locate(st: &State, row: RowId) -> Result<(u64, Slot)> {
        let n = st.phys.len() as u64;
        if row >= n {
            return Err(Error::RowOutOfRange { row, n_rows: n });
        }
        let p = st.phys[row as usize];
        if !st.eb.get(p) {
            return Err(Error::NotFound(row));
        }
        let s = slot_at(&st.bits, p).expect("a live physical row has one value");
        Ok((p, s))
    }

    fn append(st: &mut State, user: RowId, slot: Slot) -> u64 {
        let p = st.eb.n_rows();
        for (i, b) in st.bits.iter_mut().enumerate() {
            b.push_row(i == slot.index());
        }
        st.eb.push_row(true);
        st.user.push(user);
        p
    }

    fn invalidate(st: &mut State, p: u64) {
        st.eb = st.eb.flip_rows(&[p]).expect("physical row exists");
    }
}

impl<V: Value> BitmapIndex<V> for UcbIndex<V> {
    fn name(&self) -> &'static str {
        "ucb"
    }

    fn dictionary(&self) -> &Dictionary<V> {
        &self.dict
    }

    fn query(&self, pred: &Predicate<V>) -> Result<QueryResult> {
        let slots = self.dict.slots(pred)?;
        let st = self.read();
        Counters::bump(&self.counters.queries);
        let refs: Vec<&SegmentedBitvector> = slots.map(|s| &st.bits[s as usize - 1]).collect();
        let any = SegmentedBitvector::combine_with(BitOp::Or, &refs, &self.exec, None)?;
        let live = SegmentedBitvector::combine_with(BitOp::And, &[&any, &st.eb], &self.exec, None)?;
        let mut rows: Vec<RowId> = live.to_row_ids().into_iter().map(|p| st.user[p as usize]).collect();
        rows.sort_unstable();
        let bits = SegmentedBitvector::from_sorted_ones(&rows, st.phys.len() as u64, st.rps)?;
        Ok(QueryResult {
            bits: ResultBits::Segmented(bits),
            start_ts: Some(st.seq),
        })
    }

    fn update(&self, row: RowId, value: &V) -> Result<Commit> {
        let new = self.dict.slot_of(value)?;
        let mut st = self.write();
        let (p, cur) = Self::locate(&st, row)?;
        if cur == new {
            return Err(Error::SameValue(row));
        }
        Self::invalidate(&mut st, p);
        let np = Self::append(&mut st, row, new);
        st.phys[row as usize] = np;
        st.seq += 1;
        Counters::bump(&self.counters.udi_commits);
        Ok(Commit { ts: st.seq })
    }

    fn remove(&self, row: RowId) -> Result<Commit> {
        let mut st = self.write();
        let (p, _) = Self::locate(&st, row)?;
        Self::invalidate(&mut st, p);
        st.seq += 1;
        Counters::bump(&self.counters.udi_commits);
        Ok(Commit { ts: st.seq })
    }

    fn insert(&self, value: &V) -> Result<(RowId, Commit)> {
        let s = self.dict.slot_of(value)?;
        let mut st = self.write();
        let row = st.phys.len() as u64;
        let p = Self::append(&mut st, row, s);
        st.phys.push(p);
        st.seq += 1;
        Counters::bump(&self.counters.udi_commits);
        Ok((row, Commit { ts: st.seq }))
    }

    fn value_of(&self, row: RowId) -> Result<Option<V>> {
        let st = self.read();
        match Self::locate(&st, row) {
            Ok((_, s)) => Ok(Some(self.dict.value(s).clone())),
            Err(Error::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn row_count(&self) -> u64 {
        self.state.read().phys.len() as u64
    }

    fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }
}
