//! Array-of-values reference model. Knows nothing about bitmaps.

use crate::error::{BenchError, Divergence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOp {
    Update { row: u64, value: u32 },
    Remove { row: u64 },
    Insert { row: u64, value: u32 },
}

impl TraceOp {
    pub fn row(&self) -> u64 {
        match *self {
            TraceOp::Update { row, .. } | TraceOp::Remove { row } | TraceOp::Insert { row, .. } => row,
        }
    }
}

/// A committed UDI with its commit timestamp. Several entries may share a
/// timestamp when they were committed together; they then touch distinct rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub ts: u64,
    pub op: TraceOp,
}

/// Row count and order-independent row-id checksum of a query answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Answer {
    pub count: u64,
    pub digest: u64,
}

fn mix(row: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = row.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Answer {
    pub fn of_rows(rows: impl IntoIterator<Item = u64>) -> Self {
        let mut a = Answer::default();
        for r in rows {
            a.add(r);
        }
        a
    }

    fn add(&mut self, row: u64) {
        self.count += 1;
        self.digest = self.digest.wrapping_add(mix(row));
    }

    fn sub(&mut self, row: u64) {
        self.count -= 1;
        self.digest = self.digest.wrapping_sub(mix(row));
    }

    fn merge(&mut self, o: &Answer) {
        self.count += o.count;
        self.digest = self.digest.wrapping_add(o.digest);
    }
}

/// A query answer observed during a run, to be checked at `ts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryRecord {
    pub ts: u64,
    pub lo: u32,
    pub hi: u32,
    pub answer: Answer,
}

#[derive(Debug, Clone)]
pub struct ShadowOracle {
    vals: Vec<Option<u32>>,
    per_value: Vec<Answer>,
    ts: u64,
}

impl ShadowOracle {
    pub fn new(initial: &[u32], cardinality: u32) -> Self {
        let mut per_value = vec![Answer::default(); cardinality as usize];
        for (r, &v) in initial.iter().enumerate() {
            per_value[v as usize].add(r as u64);
        }
        ShadowOracle {
            vals: initial.iter().map(|&v| Some(v)).collect(),
            per_value,
            ts: 0,
        }
    }

    pub fn values(&self) -> &[Option<u32>] {
        &self.vals
    }

    /// Timestamp of the last applied entry.
    pub fn ts(&self) -> u64 {
        self.ts
    }

    fn check_value(&self, v: u32) -> Result<(), String> {
        if (v as usize) < self.per_value.len() {
            Ok(())
        } else {
            Err(format!("value {v} outside the domain"))
        }
    }

    fn live(&self, row: u64) -> Result<u32, String> {
        match self.vals.get(row as usize) {
            Some(Some(v)) => Ok(*v),
            Some(None) => Err(format!("row {row} is deleted")),
            None => Err(format!("row {row} does not exist")),
        }
    }

    fn try_apply(&mut self, e: &TraceEntry) -> Result<(), String> {
        if e.ts < self.ts {
            return Err(format!("timestamp {} after {}", e.ts, self.ts));
        }
        match e.op {
            TraceOp::Update { row, value } => {
                self.check_value(value)?;
                let old = self.live(row)?;
                if old == value {
                    return Err(format!("row {row} already holds {value}"));
                }
                self.per_value[old as usize].sub(row);
                self.per_value[value as usize].add(row);
                self.vals[row as usize] = Some(value);
            }
            TraceOp::Remove { row } => {
                let old = self.live(row)?;
                self.per_value[old as usize].sub(row);
                self.vals[row as usize] = None;
            }
            TraceOp::Insert { row, value } => {
                self.check_value(value)?;
                if row != self.vals.len() as u64 {
                    return Err(format!("insert at row {row}, expected {}", self.vals.len()));
                }
                self.per_value[value as usize].add(row);
                self.vals.push(Some(value));
            }
        }
        self.ts = e.ts;
        Ok(())
    }

    /// Applies one entry; `index` is only used in the error.
    pub fn apply(&mut self, index: usize, e: &TraceEntry) -> Result<(), BenchError> {
        self.try_apply(e).map_err(|reason| BenchError::Trace { index, reason })
    }

    /// Rows holding a value in `lo..=hi`.
    pub fn rows(&self, lo: u32, hi: u32) -> Vec<u64> {
        self.vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some_and(|v| v >= lo && v <= hi))
            .map(|(r, _)| r as u64)
            .collect()
    }

    pub fn answer(&self, lo: u32, hi: u32) -> Answer {
        let mut a = Answer::default();
        for v in lo..=hi.min(self.per_value.len() as u32 - 1) {
            a.merge(&self.per_value[v as usize]);
        }
        a
    }

    /// State after every entry with `ts <= at`, replayed from the start.
    pub fn at(initial: &[u32], cardinality: u32, trace: &[TraceEntry], at: u64) -> Result<Self, BenchError> {
        let mut o = ShadowOracle::new(initial, cardinality);
        for (i, e) in trace.iter().enumerate().take_while(|(_, e)| e.ts <= at) {
            o.apply(i, e)?;
        }
        Ok(o)
    }
}

/// Orders a trace for replay: by timestamp, then row, so that the entries of
/// one batch (distinct rows, ascending insert rows) apply in a valid order.
pub fn sort_trace(trace: &mut [TraceEntry]) {
    trace.sort_unstable_by_key(|e| (e.ts, e.op.row()));
}

/// Replays a timestamp-ordered trace and returns the final state.
pub fn oracle_replay(initial: &[u32], cardinality: u32, trace: &[TraceEntry]) -> Result<ShadowOracle, BenchError> {
    ShadowOracle::at(initial, cardinality, trace, u64::MAX)
}

/// Checks every recorded answer against the replayed state at its start
/// timestamp. Both inputs must be sorted by timestamp. Returns the final state.
pub fn check_queries(
    initial: &[u32],
    cardinality: u32,
    trace: &[TraceEntry],
    queries: &[QueryRecord],
) -> Result<ShadowOracle, BenchError> {
    let mut o = ShadowOracle::new(initial, cardinality);
    let mut next = 0;
    for q in queries {
        while next < trace.len() && trace[next].ts <= q.ts {
            o.apply(next, &trace[next])?;
            next += 1;
        }
        let want = o.answer(q.lo, q.hi);
        if want != q.answer {
            return Err(BenchError::Verification(Divergence {
                ts: q.ts,
                what: format!(
                    "query [{}, {}] returned {} rows, oracle has {}{}",
                    q.lo,
                    q.hi,
                    q.answer.count,
                    want.count,
                    if want.count == q.answer.count { " (different rows)" } else { "" }
                ),
            }));
        }
    }
    for (i, e) in trace.iter().enumerate().skip(next) {
        o.apply(i, e)?;
    }
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(ts: u64, op: TraceOp) -> TraceEntry {
        TraceEntry { ts, op }
    }

    #[test]
    fn empty_trace_is_the_build_state() {
        let o = oracle_replay(&[1, 0, 1], 2, &[]).unwrap();
        assert_eq!(o.values(), &[Some(1), Some(0), Some(1)]);
        assert_eq!(o.answer(1, 1), Answer::of_rows([0, 2]));
    }

    #[test]
    fn malformed_traces_are_rejected() {
        let bad = [
            vec![e(1, TraceOp::Update { row: 9, value: 0 })],
            vec![e(1, TraceOp::Remove { row: 0 }), e(2, TraceOp::Remove { row: 0 })],
            vec![e(1, TraceOp::Insert { row: 5, value: 0 })],
            vec![e(2, TraceOp::Remove { row: 0 }), e(1, TraceOp::Remove { row: 1 })],
            vec![e(1, TraceOp::Update { row: 0, value: 7 })],
            vec![e(1, TraceOp::Update { row: 0, value: 1 })],
        ];
        for t in bad {
            assert!(matches!(oracle_replay(&[1, 0], 2, &t), Err(BenchError::Trace { .. })), "{t:?}");
        }
    }

    #[test]
    fn answers_match_row_scan() {
        let t = [
            e(1, TraceOp::Update { row: 0, value: 2 }),
            e(2, TraceOp::Insert { row: 3, value: 0 }),
            e(2, TraceOp::Remove { row: 1 }),
        ];
        let mut t = t.to_vec();
        sort_trace(&mut t);
        let o = oracle_replay(&[0, 1, 2], 3, &t).unwrap();
        for lo in 0..3 {
            for hi in lo..3 {
                assert_eq!(o.answer(lo, hi), Answer::of_rows(o.rows(lo, hi)));
            }
        }
        assert_eq!(ShadowOracle::at(&[0, 1, 2], 3, &t, 1).unwrap().rows(2, 2), vec![0, 2]);
    }
}
