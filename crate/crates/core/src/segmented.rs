//! Bitvectors cut into fixed-size, independently compressed segments.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::wah::{BitOp, WahBitvector};

/// Intermediate results denser than this leave the compressed path.
pub const INTERMEDIATE_DENSITY_LIMIT: f64 = 0.002;
/// Operands denser than this are decompressed before combining.
pub const OPERAND_DENSITY_LIMIT: f64 = 0.02;

/// Runs batches of segment work on caller-supplied lanes.
pub trait Executor: Sync {
    /// Lanes to use for `n_items` independent work items.
    fn lanes_for(&self, n_items: usize) -> usize;
    /// Runs every job to completion before returning.
    fn run<'a>(&self, jobs: Vec<Box<dyn FnOnce() + Send + 'a>>);
}

/// Runs everything on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct SerialExecutor;

impl Executor for SerialExecutor {
    fn lanes_for(&self, _n_items: usize) -> usize {
        1
    }

    fn run<'a>(&self, jobs: Vec<Box<dyn FnOnce() + Send + 'a>>) {
        for job in jobs {
            job()
        }
    }
}

/// Fans work out over the rayon thread pool; the calling thread takes the first lane.
#[derive(Debug, Clone, Copy)]
pub struct ScopedExecutor {
    lanes: usize,
    min_items_per_lane: usize,
}

impl ScopedExecutor {
    pub fn new(lanes: usize) -> Self {
        ScopedExecutor {
            lanes: lanes.max(1),
            min_items_per_lane: 256,
        }
    }

    /// Below this many items per lane the work stays on fewer lanes.
    pub fn with_min_items_per_lane(mut self, n: usize) -> Self {
        self.min_items_per_lane = n.max(1);
        self
    }
}

impl Executor for ScopedExecutor {
    fn lanes_for(&self, n_items: usize) -> usize {
        self.lanes.min(n_items / self.min_items_per_lane).max(1)
    }

    fn run<'a>(&self, mut jobs: Vec<Box<dyn FnOnce() + Send + 'a>>) {
        if jobs.is_empty() {
            return;
        }
        let first = jobs.remove(0);
        rayon::scope(|s| {
            for job in jobs {
                s.spawn(move |_| job());
            }
            first();
        });
    }
}

/// Maps `f` over `0..n`, split into contiguous chunks across lanes. Output order
/// is always `0..n` regardless of scheduling.
pub(crate) fn par_map<T, F>(exec: &dyn Executor, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let lanes = exec.lanes_for(n).clamp(1, n.max(1));
    if lanes == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(lanes);
    let mut outs: Vec<Vec<T>> = (0..lanes).map(|_| Vec::new()).collect();
    let f = &f;
    let jobs: Vec<Box<dyn FnOnce() + Send + '_>> = outs
        .iter_mut()
        .enumerate()
        .map(|(lane, out)| {
            let range = (lane * chunk).min(n)..((lane + 1) * chunk).min(n);
            Box::new(move || *out = range.map(f).collect()) as Box<dyn FnOnce() + Send + '_>
        })
        .collect();
    exec.run(jobs);
    outs.into_iter().flatten().collect()
}

/// Which path each combine step took.
#[derive(Debug, Default)]
pub struct CombineCounters {
    pub compressed_steps: AtomicU64,
    pub block_steps: AtomicU64,
    pub operands_decompressed: AtomicU64,
}

impl CombineCounters {
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.compressed_steps.load(Ordering::Relaxed),
            self.block_steps.load(Ordering::Relaxed),
            self.operands_decompressed.load(Ordering::Relaxed),
        )
    }
}

/// Default rows per segment for `n_rows`: a thousand segments, floored at `min`.
pub fn default_rows_per_segment(n_rows: u64, segments: u64, min: u64) -> u64 {
    n_rows.div_ceil(segments.max(1)).max(min).max(1)
}

#[derive(Clone, PartialEq, Eq)]
pub struct SegmentedBitvector {
    segments: Vec<Arc<WahBitvector>>,
    n_rows: u64,
    rows_per_segment: u64,
}

impl std::fmt::Debug for SegmentedBitvector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegmentedBitvector")
            .field("n_rows", &self.n_rows)
            .field("rows_per_segment", &self.rows_per_segment)
            .field("segments", &self.segments.len())
            .field("ones", &self.count_ones())
            .finish()
    }
}

impl SegmentedBitvector {
    pub fn new(n_rows: u64, rows_per_segment: u64, initial: bool) -> Result<Self> {
        if rows_per_segment == 0 {
            return Err(Error::Config("rows_per_segment must be at least 1".into()));
        }
        let full = n_rows / rows_per_segment;
        let shared = Arc::new(WahBitvector::filled(rows_per_segment, initial));
        let mut segments: Vec<_> = (0..full).map(|_| shared.clone()).collect();
        let rem = n_rows % rows_per_segment;
        if rem > 0 {
            segments.push(Arc::new(WahBitvector::filled(rem, initial)));
        }
        Ok(SegmentedBitvector {
            segments,
            n_rows,
            rows_per_segment,
        })
    }

    /// Builds from ascending positions of set bits.
    pub fn from_sorted_ones(ones: &[u64], n_rows: u64, rows_per_segment: u64) -> Result<Self> {
        let mut v = Self::new(0, rows_per_segment, false)?;
        let n_segments = n_rows.div_ceil(rows_per_segment);
        let mut i = 0;
        for k in 0..n_segments {
            let base = k * rows_per_segment;
            let len = rows_per_segment.min(n_rows - base);
            let start = i;
            while i < ones.len() && ones[i] < base + len {
                i += 1;
            }
            let local: Vec<u64> = ones[start..i].iter().map(|&r| r.wrapping_sub(base)).collect();
            v.segments.push(Arc::new(WahBitvector::from_sorted_ones(&local, len)?));
        }
        if i < ones.len() {
            return Err(Error::OutOfRange {
                index: ones[i],
                len: n_rows,
            });
        }
        v.n_rows = n_rows;
        Ok(v)
    }

    pub fn from_bits(bits: &[bool], rows_per_segment: u64) -> Result<Self> {
        let ones: Vec<u64> = bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i as u64))
            .collect();
        Self::from_sorted_ones(&ones, bits.len() as u64, rows_per_segment)
    }

    pub fn n_rows(&self) -> u64 {
        self.n_rows
    }

    pub fn rows_per_segment(&self) -> u64 {
        self.rows_per_segment
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, k: usize) -> &WahBitvector {
        &self.segments[k]
    }

    pub fn segments(&self) -> impl Iterator<Item = &WahBitvector> {
        self.segments.iter().map(|s| &**s)
    }

    /// Bit `row`, reading zero past the end.
    pub fn get(&self, row: u64) -> bool {
        if row >= self.n_rows {
            return false;
        }
        let k = (row / self.rows_per_segment) as usize;
        self.segments[k].get_or_zero(row % self.rows_per_segment)
    }

    pub fn count_ones(&self) -> u64 {
        self.segments.iter().map(|s| s.count_ones()).sum()
    }

    pub fn density(&self) -> f64 {
        if self.n_rows == 0 {
            0.0
        } else {
            self.count_ones() as f64 / self.n_rows as f64
        }
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_rows as usize);
        for s in &self.segments {
            out.extend(s.decode());
        }
        out
    }

    pub fn flip_rows(&self, rows: &[u64]) -> Result<Self> {
        self.flip_rows_with(rows, &SerialExecutor)
    }

    /// Flips the listed rows (strictly ascending). Only segments holding a listed
    /// row are rewritten; the rest are shared with `self`.
    pub fn flip_rows_with(&self, rows: &[u64], exec: &dyn Executor) -> Result<Self> {
        if rows.is_empty() {
            return Ok(self.clone());
        }
        for w in rows.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Unsorted);
            }
        }
        let last = *rows.last().unwrap();
        if last >= self.n_rows {
            return Err(Error::OutOfRange {
                index: last,
                len: self.n_rows,
            });
        }
        // (segment, range into rows)
        let mut groups: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
        let mut i = 0;
        while i < rows.len() {
            let k = rows[i] / self.rows_per_segment;
            let start = i;
            while i < rows.len() && rows[i] / self.rows_per_segment == k {
                i += 1;
            }
            groups.push((k as usize, start..i));
        }
        let rps = self.rows_per_segment;
        let rewritten = par_map(exec, groups.len(), |g| {
            let (k, ref range) = groups[g];
            let base = k as u64 * rps;
            let local: Vec<u64> = rows[range.clone()].iter().map(|r| r - base).collect();
            self.segments[k]
                .flip_many(&local)
                .expect("rows validated against segment bounds")
        });
        let mut out = self.clone();
        for ((k, _), seg) in groups.iter().zip(rewritten) {
            out.segments[*k] = Arc::new(seg);
        }
        Ok(out)
    }

    pub fn append_row(&self, bit: bool) -> Self {
        let mut v = self.clone();
        v.push_row(bit);
        v
    }

    pub fn push_row(&mut self, bit: bool) {
        match self.segments.last_mut() {
            Some(last) if last.bit_len() < self.rows_per_segment => Arc::make_mut(last).push(bit),
            _ => {
                let mut s = WahBitvector::new();
                s.push(bit);
                self.segments.push(Arc::new(s));
            }
        }
        self.n_rows += 1;
    }

    /// Zero-pads to `n_rows`; never shrinks.
    pub fn extend_to(&mut self, n_rows: u64) {
        if n_rows <= self.n_rows {
            return;
        }
        let rps = self.rows_per_segment;
        if let Some(last) = self.segments.last_mut() {
            if last.bit_len() < rps {
                let target = rps.min(last.bit_len() + (n_rows - self.n_rows));
                let grow = target - last.bit_len();
                Arc::make_mut(last).extend_zeros(target);
                self.n_rows += grow;
            }
        }
        let remaining = n_rows - self.n_rows;
        if remaining == 0 {
            return;
        }
        let full = remaining / rps;
        if full > 0 {
            let zero = Arc::new(WahBitvector::zeros(rps));
            self.segments.extend((0..full).map(|_| zero.clone()));
        }
        let rem = remaining % rps;
        if rem > 0 {
            self.segments.push(Arc::new(WahBitvector::zeros(rem)));
        }
        self.n_rows = n_rows;
    }

    pub fn extended_to(&self, n_rows: u64) -> Self {
        let mut v = self.clone();
        v.extend_to(n_rows);
        v
    }

    pub fn to_row_ids(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for (k, s) in self.segments.iter().enumerate() {
            s.push_ones_into(k as u64 * self.rows_per_segment, &mut out);
        }
        out
    }

    pub fn combine(op: BitOp, inputs: &[&SegmentedBitvector]) -> Result<Self> {
        Self::combine_with(op, inputs, &SerialExecutor, None)
    }

    /// Per-segment multi-way combine with the density-adaptive policy.
    pub fn combine_with(
        op: BitOp,
        inputs: &[&SegmentedBitvector],
        exec: &dyn Executor,
        counters: Option<&CombineCounters>,
    ) -> Result<Self> {
        let Some(first) = inputs.first() else {
            return Err(Error::ShapeMismatch("combine needs at least one input".into()));
        };
        for v in &inputs[1..] {
            if v.n_rows != first.n_rows || v.rows_per_segment != first.rows_per_segment {
                return Err(Error::ShapeMismatch(format!(
                    "({} rows, {} per segment) vs ({} rows, {} per segment)",
                    first.n_rows, first.rows_per_segment, v.n_rows, v.rows_per_segment
                )));
            }
        }
        if inputs.len() == 1 {
            return Ok((*first).clone());
        }
        let segments = par_map(exec, first.segments.len(), |k| {
            let parts: Vec<&Arc<WahBitvector>> = inputs.iter().map(|v| &v.segments[k]).collect();
            combine_segment(op, &parts, counters)
        });
        Ok(SegmentedBitvector {
            segments,
            n_rows: first.n_rows,
            rows_per_segment: first.rows_per_segment,
        })
    }
}

enum Acc {
    Compressed(Arc<WahBitvector>),
    Blocks(Vec<u64>),
}

fn bump(c: Option<&CombineCounters>, f: impl Fn(&CombineCounters) -> &AtomicU64) {
    if let Some(c) = c {
        f(c).fetch_add(1, Ordering::Relaxed);
    }
}

fn combine_segment(
    op: BitOp,
    parts: &[&Arc<WahBitvector>],
    counters: Option<&CombineCounters>,
) -> Arc<WahBitvector> {
    let len = parts[0].bit_len();
    let mut acc = Acc::Compressed(parts[0].clone());
    for &operand in &parts[1..] {
        if matches!(op, BitOp::Or | BitOp::Xor) && !operand.any() {
            continue;
        }
        let dense = operand.density() > OPERAND_DENSITY_LIMIT;
        acc = match acc {
            Acc::Compressed(a) if !dense && a.density() < INTERMEDIATE_DENSITY_LIMIT => {
                bump(counters, |c| &c.compressed_steps);
                Acc::Compressed(Arc::new(a.bitwise(op, operand).expect("equal segment lengths")))
            }
            Acc::Compressed(a) => {
                bump(counters, |c| &c.block_steps);
                let mut blocks = a.to_blocks();
                apply_operand(op, operand, dense, &mut blocks, counters);
                Acc::Blocks(blocks)
            }
            Acc::Blocks(mut blocks) => {
                bump(counters, |c| &c.block_steps);
                apply_operand(op, operand, dense, &mut blocks, counters);
                Acc::Blocks(blocks)
            }
        };
    }
    match acc {
        Acc::Compressed(a) => a,
        Acc::Blocks(b) => Arc::new(WahBitvector::from_blocks(&b, len)),
    }
}

fn apply_operand(
    op: BitOp,
    operand: &WahBitvector,
    dense: bool,
    blocks: &mut [u64],
    counters: Option<&CombineCounters>,
) {
    if dense {
        bump(counters, |c| &c.operands_decompressed);
        for (a, b) in blocks.iter_mut().zip(operand.to_blocks()) {
            *a = op.apply_u64(*a, b);
        }
    } else {
        operand.apply_to_blocks(op, blocks);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bits(rng: &mut impl Rng, n: usize, d: f64) -> Vec<bool> {
        (0..n).map(|_| rng.gen_bool(d)).collect()
    }

    /// Runs jobs back to front, to shake out ordering assumptions.
    struct ReversedExecutor(usize);

    impl Executor for ReversedExecutor {
        fn lanes_for(&self, _n: usize) -> usize {
            self.0
        }
        fn run<'a>(&self, jobs: Vec<Box<dyn FnOnce() + Send + 'a>>) {
            for j in jobs.into_iter().rev() {
                j()
            }
        }
    }

    #[test]
    fn new_shapes() {
        assert_eq!(SegmentedBitvector::new(0, 100, false).unwrap().segment_count(), 0);
        let v = SegmentedBitvector::new(250, 100, false).unwrap();
        let lens: Vec<u64> = v.segments().map(|s| s.bit_len()).collect();
        assert_eq!(lens, vec![100, 100, 50]);
        let ones = SegmentedBitvector::new(1_000_000, 1000, true).unwrap();
        assert_eq!(ones.count_ones(), 1_000_000);
        assert!(matches!(SegmentedBitvector::new(10, 0, false), Err(Error::Config(_))));
    }

    #[test]
    fn flip_empty_is_identity() {
        let v = SegmentedBitvector::from_bits(&[true, false, true], 2).unwrap();
        assert_eq!(v.flip_rows(&[]).unwrap(), v);
    }

    #[test]
    fn flip_out_of_range() {
        let v = SegmentedBitvector::new(10, 4, false).unwrap();
        assert!(matches!(v.flip_rows(&[10]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn flip_thousand_rows_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000u64;
        let v = SegmentedBitvector::from_bits(&random_bits(&mut rng, n as usize, 0.01), 100).unwrap();
        let mut rows: Vec<u64> = (0..1000).map(|_| rng.gen_range(0..n)).collect();
        rows.sort_unstable();
        rows.dedup();
        let mut expect = v.decode();
        for &r in &rows {
            expect[r as usize] = !expect[r as usize];
        }
        assert_eq!(v.flip_rows(&rows).unwrap().decode(), expect);
        let par = v.flip_rows_with(&rows, &ScopedExecutor::new(4).with_min_items_per_lane(1)).unwrap();
        assert_eq!(par.decode(), expect);
    }

    #[test]
    fn flip_leaves_other_segments_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = SegmentedBitvector::from_bits(&random_bits(&mut rng, 1000, 0.1), 100).unwrap();
        let f = v.flip_rows(&[350, 399]).unwrap();
        for k in 0..10 {
            if k == 3 {
                assert_ne!(f.segment(k).to_bytes(), v.segment(k).to_bytes());
            } else {
                assert_eq!(f.segment(k).to_bytes(), v.segment(k).to_bytes());
                assert!(Arc::ptr_eq(&f.segments[k], &v.segments[k]));
            }
        }
    }

    #[test]
    fn or_single_input() {
        let v = SegmentedBitvector::from_bits(&[true, false, true, true], 3).unwrap();
        assert_eq!(SegmentedBitvector::combine(BitOp::Or, &[&v]).unwrap(), v);
        assert!(SegmentedBitvector::combine(BitOp::Or, &[]).is_err());
        let w = SegmentedBitvector::new(4, 2, false).unwrap();
        assert!(matches!(
            SegmentedBitvector::combine(BitOp::Or, &[&v, &w]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn density_policy_is_observable() {
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sparse = |rng: &mut ChaCha8Rng| {
            let mut bits = vec![false; n];
            for _ in 0..10 {
                bits[rng.gen_range(0..n)] = true;
            }
            bits
        };
        // 0.1% intermediate, sparse operand: compressed path
        let a = SegmentedBitvector::from_bits(&sparse(&mut rng), n as u64).unwrap();
        let b = SegmentedBitvector::from_bits(&sparse(&mut rng), n as u64).unwrap();
        let c = CombineCounters::default();
        SegmentedBitvector::combine_with(BitOp::Or, &[&a, &b], &SerialExecutor, Some(&c)).unwrap();
        assert_eq!(c.snapshot(), (1, 0, 0));
        // 3% operand: decompressed
        let dense = SegmentedBitvector::from_bits(&random_bits(&mut rng, n, 0.03), n as u64).unwrap();
        assert!(dense.density() > OPERAND_DENSITY_LIMIT);
        let c = CombineCounters::default();
        SegmentedBitvector::combine_with(BitOp::Or, &[&a, &dense], &SerialExecutor, Some(&c)).unwrap();
        assert_eq!(c.snapshot(), (0, 1, 1));
    }

    #[test]
    fn or_of_393_sparse_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(393);
        let n = 50_000;
        let mut acc = vec![false; n];
        let mut inputs = Vec::new();
        for i in 0..393 {
            let d = if i % 50 == 0 { 0.05 } else { 0.0005 };
            let bits = random_bits(&mut rng, n, d);
            for (a, b) in acc.iter_mut().zip(&bits) {
                *a |= b;
            }
            inputs.push(SegmentedBitvector::from_bits(&bits, 50).unwrap());
        }
        let refs: Vec<&SegmentedBitvector> = inputs.iter().collect();
        let r = SegmentedBitvector::combine(BitOp::Or, &refs).unwrap();
        assert_eq!(r.decode(), acc);
        assert!(r.segments().all(|s| s.is_canonical()));
    }

    #[test]
    fn to_row_ids_examples() {
        assert!(SegmentedBitvector::new(500, 64, false).unwrap().to_row_ids().is_empty());
        let v = SegmentedBitvector::from_sorted_ones(&[0, 31, 62], 100, 40).unwrap();
        assert_eq!(v.to_row_ids(), vec![0, 31, 62]);
    }

    #[test]
    fn append_grows_segments() {
        let rps = 8;
        let mut v = SegmentedBitvector::new(0, rps, false).unwrap();
        let mut bits = Vec::new();
        for i in 0..(2 * rps + 1) {
            let b = i % 3 == 1;
            v = v.append_row(b);
            bits.push(b);
            assert_eq!(v, SegmentedBitvector::from_bits(&bits, rps).unwrap());
        }
        assert_eq!(v.segment_count(), 3);
        let full = SegmentedBitvector::new(16, 8, false).unwrap();
        assert_eq!(full.append_row(false).segment_count(), 3);
        assert_eq!(full.append_row(false).count_ones(), 0);
    }

    #[test]
    fn extend_to_matches_rebuild() {
        for start in [0u64, 3, 8, 13] {
            for end in [start, start + 1, start + 5, start + 17, start + 40] {
                let bits: Vec<bool> = (0..start).map(|i| i % 2 == 0).collect();
                let mut v = SegmentedBitvector::from_bits(&bits, 8).unwrap();
                v.extend_to(end);
                let mut padded = bits.clone();
                padded.resize(end as usize, false);
                assert_eq!(v, SegmentedBitvector::from_bits(&padded, 8).unwrap());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn prop_ops_match_decoded(seed in any::<u64>(), n in 0usize..3000, rps in 1u64..300, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Vec<bool>> = (0..k)
                .map(|_| {
                    let d = [0.0005, 0.005, 0.05, 0.5][rng.gen_range(0..4)];
                    random_bits(&mut rng, n, d)
                })
                .collect();
            let vs: Vec<SegmentedBitvector> =
                inputs.iter().map(|b| SegmentedBitvector::from_bits(b, rps).unwrap()).collect();
            let refs: Vec<&SegmentedBitvector> = vs.iter().collect();
            for op in [BitOp::And, BitOp::Or] {
                let expect: Vec<bool> = (0..n)
                    .map(|i| inputs[1..].iter().fold(inputs[0][i], |a, b| op.apply_bit(a, b[i])))
                    .collect();
                prop_assert_eq!(SegmentedBitvector::combine(op, &refs).unwrap().decode(), expect);
            }
            let ids: Vec<u64> = (0..n as u64).filter(|&i| inputs[0][i as usize]).collect();
            prop_assert_eq!(vs[0].to_row_ids(), ids);
            if n > 0 {
                let mut rows: Vec<u64> = (0..rng.gen_range(0..50)).map(|_| rng.gen_range(0..n as u64)).collect();
                rows.sort_unstable();
                rows.dedup();
                let mut expect = inputs[0].clone();
                for &r in &rows {
                    expect[r as usize] = !expect[r as usize];
                }
                let serial = vs[0].flip_rows(&rows).unwrap();
                prop_assert_eq!(serial.decode(), expect);
                for lanes in 1..6 {
                    let par = vs[0].flip_rows_with(&rows, &ReversedExecutor(lanes)).unwrap();
                    prop_assert_eq!(&par, &serial);
                }
            }
        }
    }
}
