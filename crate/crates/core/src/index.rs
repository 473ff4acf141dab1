//! The CUBIT index: snapshots, queries, UDIs and merges over the Delta Log and
//! the per-value version chains.

use std::collections::VecDeque;
use std::fmt;
use std::ops::RangeInclusive;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_queue::ArrayQueue;
use crossbeam_utils::{Backoff, CachePadded};
use parking_lot::Mutex;

use crate::delta::{scan_window, xor_positions, DeltaLog, Hud, Positions, RowId, Slot, Ule, UleKind, Window};
use crate::error::{Error, Result};
use crate::fault::Faults;
use crate::reclaim::{Domain, Guard};
use crate::segmented::{
    default_rows_per_segment, par_map, CombineCounters, ScopedExecutor, SegmentedBitvector,
};
use crate::stats::{AllocStats, CounterSnapshot, Counters, QueryScope};
use crate::sync::{Conflict, Deposit, Latch, SyncVariant, UdiPayload};
use crate::traits::{column_ones, BitmapIndex, Commit, Dictionary, Predicate, QueryResult, ResultBits, Value};
use crate::version::{plan_merge, VersionChain, VersionedVb};
use crate::wah::BitOp;

/// Reclaimed objects held back before their memory is reused, with `checked`.
const QUARANTINE_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    /// Upper bound on distinct values.
    pub cardinality: usize,
    /// A query flipping more rows than this for one value requests a merge.
    pub merge_threshold: usize,
    /// Target segments per bitvector.
    pub segments: u64,
    pub min_rows_per_segment: u64,
    /// Overrides the segment size derived from `segments`.
    pub rows_per_segment: Option<u64>,
    /// Helper lanes for per-segment and per-value work inside one operation.
    pub query_lanes: usize,
    /// Worker threads per maintenance thread.
    pub maintenance_ratio: usize,
    pub sync: SyncVariant,
    /// Keep empty residual HUDs as explicit `<row, 0, ∅>` entries.
    pub debug_empty_huds: bool,
    /// Failed latch attempts before an `lk` committer consolidates.
    pub consolidate_after: u32,
    pub merge_queue_cap: usize,
    /// Re-enqueues of a conflicting merge before it is given up.
    pub merge_retry_limit: u32,
    /// Log entries a value may lag behind the tail before maintenance rebases it.
    pub log_backlog_limit: u64,
    pub ule_pool_chunk: usize,
    /// Queries enqueue merge requests.
    pub auto_merge: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            cardinality: 1 << 16,
            merge_threshold: 16,
            segments: 1000,
            min_rows_per_segment: 64,
            rows_per_segment: None,
            query_lanes: 2,
            maintenance_ratio: 4,
            sync: SyncVariant::Lf,
            debug_empty_huds: false,
            consolidate_after: 4,
            merge_queue_cap: 1024,
            merge_retry_limit: 3,
            log_backlog_limit: 1024,
            ule_pool_chunk: 1024,
            auto_merge: true,
        }
    }
}

impl IndexConfig {
    pub fn new(cardinality: usize) -> Self {
        IndexConfig {
            cardinality,
            ..Default::default()
        }
    }

    pub fn with_sync(mut self, sync: SyncVariant) -> Self {
        self.sync = sync;
        self
    }

    pub fn with_merge_threshold(mut self, t: usize) -> Self {
        self.merge_threshold = t;
        self
    }

    pub fn with_rows_per_segment(mut self, rps: u64) -> Self {
        self.rows_per_segment = Some(rps);
        self
    }

    pub fn with_query_lanes(mut self, lanes: usize) -> Self {
        self.query_lanes = lanes;
        self
    }

    pub fn with_debug_empty_huds(mut self, on: bool) -> Self {
        self.debug_empty_huds = on;
        self
    }

    pub fn with_auto_merge(mut self, on: bool) -> Self {
        self.auto_merge = on;
        self
    }

    pub fn with_log_backlog_limit(mut self, n: u64) -> Self {
        self.log_backlog_limit = n;
        self
    }

    pub fn with_merge_queue_cap(mut self, n: usize) -> Self {
        self.merge_queue_cap = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cardinality", self.cardinality as u64),
            ("merge_threshold", self.merge_threshold as u64),
            ("segments", self.segments),
            ("min_rows_per_segment", self.min_rows_per_segment),
            ("query_lanes", self.query_lanes as u64),
            ("maintenance_ratio", self.maintenance_ratio as u64),
            ("consolidate_after", self.consolidate_after as u64),
            ("merge_queue_cap", self.merge_queue_cap as u64),
            ("log_backlog_limit", self.log_backlog_limit),
            ("ule_pool_chunk", self.ule_pool_chunk as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.rows_per_segment == Some(0) {
            return Err(Error::Config("rows_per_segment must be positive".into()));
        }
        if self.cardinality > u32::MAX as usize {
            return Err(Error::Config("cardinality exceeds 2^32-1".into()));
        }
        Ok(())
    }

    /// Maintenance threads for `workers` worker threads.
    pub fn maintenance_threads(&self, workers: usize) -> usize {
        workers.div_ceil(self.maintenance_ratio).max(1)
    }
}

/// Bits a query already computed for one value, offered to the merge it triggered.
pub(crate) struct Donation {
    /// Snapshot timestamp the bits were evaluated at.
    pub(crate) q: u64,
    pub(crate) base_ts: u64,
    pub(crate) bits: SegmentedBitvector,
}

pub(crate) struct MergeRequest {
    pub(crate) slot: Slot,
    pub(crate) donation: Option<Donation>,
    pub(crate) attempts: u32,
}

/// Owned copy of one Delta Log entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub ts: u64,
    pub kind: UleKind,
    pub huds: Vec<Hud>,
    pub elided_rows: Vec<RowId>,
    pub merged_slot: Option<Slot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    Committed { ts: u64 },
    NothingToMerge,
    Conflict,
}

pub(crate) enum Garbage {
    Ule(*mut Ule),
    Version(*mut VersionedVb),
}

/// Retired-but-not-yet-free objects, owned by whichever thread runs reclamation.
#[derive(Default)]
pub(crate) struct ReclaimState {
    /// Unlinked versions and the epoch each waits for.
    pub(crate) versions: Vec<(*mut VersionedVb, u64)>,
    /// Log prefix `[from, to)` already unlinked from HEAD.
    pub(crate) ules: Option<(*mut Ule, *mut Ule, u64)>,
}

// SAFETY: the pointers are owned by the state; only the reclaim lock holder touches them.
unsafe impl Send for ReclaimState {}

/// A consistent read point: everything committed at or before `start_ts`.
#[derive(Clone, Copy)]
pub(crate) struct Snapshot<'g> {
    pub(crate) start_ts: u64,
    /// The entry whose commit_ts is `start_ts`.
    pub(crate) end: &'g Ule,
}

/// What a UDI needs to know about one row at its snapshot.
pub(crate) struct RowView {
    pub(crate) slot: Option<Slot>,
    /// Positions of the row's latest HUD that still differ from the versions in use.
    pub(crate) eff: Positions,
}

pub(crate) struct IndexCore {
    pub(crate) config: IndexConfig,
    pub(crate) timestamp: CachePadded<AtomicU64>,
    pub(crate) n_rows: CachePadded<AtomicU64>,
    pub(crate) chains: Vec<VersionChain>,
    pub(crate) log: DeltaLog,
    pub(crate) domain: Domain,
    pub(crate) latch: Latch,
    pub(crate) deposits: Mutex<Vec<Arc<Deposit>>>,
    pub(crate) merge_queue: ArrayQueue<MergeRequest>,
    pub(crate) merge_pending: Vec<AtomicBool>,
    pub(crate) counters: Counters,
    pub(crate) reclaim: Mutex<ReclaimState>,
    /// Snapshots older than this must re-read the tail; raised by the
    /// reclaimer before it trims version chains.
    pub(crate) trim_watermark: AtomicU64,
    quarantine: Mutex<VecDeque<Garbage>>,
    pub(crate) alloc: Arc<AllocStats>,
    pub(crate) exec: ScopedExecutor,
    pub(crate) combine_counters: CombineCounters,
    pub(crate) faults: Faults,
}

// SAFETY: raw pointers inside are reached only through the commit and
// reclamation protocols.
unsafe impl Send for IndexCore {}
unsafe impl Sync for IndexCore {}

impl IndexCore {
    fn new(ones: Vec<Vec<u64>>, n_rows: u64, config: IndexConfig) -> Result<Self> {
        config.validate()?;
        let rps = config.rows_per_segment.unwrap_or_else(|| {
            default_rows_per_segment(n_rows, config.segments, config.min_rows_per_segment)
        });
        let alloc = Arc::new(AllocStats::default());
        let log = DeltaLog::with_pool(n_rows, config.ule_pool_chunk, alloc.clone());
        let dummy = log.head.load(Ordering::Relaxed);
        let mut chains = Vec::with_capacity(ones.len());
        for o in &ones {
            let bits = SegmentedBitvector::from_sorted_ones(o, n_rows, rps)?;
            chains.push(VersionChain::new(VersionedVb::with_start(bits, 0, dummy)));
            alloc.versions_live.fetch_add(1, Ordering::Relaxed);
        }
        let c = chains.len();
        Ok(IndexCore {
            timestamp: CachePadded::new(AtomicU64::new(0)),
            n_rows: CachePadded::new(AtomicU64::new(n_rows)),
            chains,
            log,
            domain: Domain::new(),
            latch: Latch::default(),
            deposits: Mutex::new(Vec::new()),
            merge_queue: ArrayQueue::new(config.merge_queue_cap),
            merge_pending: (0..c).map(|_| AtomicBool::new(false)).collect(),
            counters: Counters::default(),
            reclaim: Mutex::new(ReclaimState::default()),
            trim_watermark: AtomicU64::new(0),
            quarantine: Mutex::new(VecDeque::new()),
            alloc,
            exec: ScopedExecutor::new(config.query_lanes),
            combine_counters: CombineCounters::default(),
            faults: Faults::default(),
            config,
        })
    }

    /// The current tail, announced on `g` so that reclamation keeps the
    /// versions visible at its timestamp.
    pub(crate) fn pinned_tail<'g>(&self, g: &Guard<'_>) -> &'g Ule {
        loop {
            let end = self.tail_ref();
            g.announce(end.commit_ts);
            // a reclaimer that trimmed chains for newer snapshots missed us
            if self.trim_watermark.load(Ordering::SeqCst) <= end.commit_ts {
                return end;
            }
        }
    }

    pub(crate) fn snapshot<'g>(&self, g: &'g Guard<'_>) -> Snapshot<'g> {
        // The tail's descriptor is complete once it is the tail, so every
        // shared variable already reflects all entries up to it.
        let end = self.pinned_tail(g);
        Snapshot {
            start_ts: end.commit_ts,
            end,
        }
    }

    fn versions_at<'g>(&self, slots: RangeInclusive<u32>, snap: &Snapshot<'g>) -> Vec<&'g VersionedVb> {
        slots
            .map(|s| self.chains[s as usize - 1].lookup_in(snap.start_ts))
            .collect()
    }

    /// Window covering every version in `versions`.
    fn window_for<'g>(&self, versions: &[&'g VersionedVb], snap: &Snapshot<'g>, row: Option<RowId>) -> Window<'g> {
        let oldest = versions
            .iter()
            .min_by_key(|v| v.commit_ts)
            .expect("at least one version");
        scan_window(oldest.start_delta_ref(), oldest.commit_ts, snap.start_ts, row)
    }

    /// Rows whose bit in `slot` differs from `base` at the window end.
    fn flipped_rows(window: &Window<'_>, slot: Slot, base: &VersionedVb) -> Vec<RowId> {
        window
            .latest
            .iter()
            .filter(|(_, ts, cell, _)| *ts > base.commit_ts && cell.is_some_and(|c| c.hud.contains(slot)))
            .map(|e| e.0)
            .collect()
    }

    fn apply_rows(&self, base: &VersionedVb, rows: &[RowId], n_rows: u64) -> SegmentedBitvector {
        if rows.is_empty() && base.bits.n_rows() == n_rows {
            return base.bits.clone();
        }
        base.bits
            .extended_to(n_rows)
            .flip_rows_with(rows, &self.exec)
            .expect("window rows are sorted and below the row count")
    }

    pub(crate) fn query_slots(&self, slots: RangeInclusive<u32>) -> QueryResult {
        let _scope = QueryScope::enter();
        let g = self.domain.pin();
        let snap = self.snapshot(&g);
        let first = *slots.start();
        let versions = self.versions_at(slots.clone(), &snap);
        let window = self.window_for(&versions, &snap, None);
        let n = snap.end.n_rows_after;
        let evals = par_map(&self.exec, versions.len(), |i| {
            let slot = Slot::from_index((first - 1) as usize + i);
            let rows = Self::flipped_rows(&window, slot, versions[i]);
            (self.apply_rows(versions[i], &rows, n), rows.len())
        });
        Counters::bump(&self.counters.queries);
        let flips: usize = evals.iter().map(|e| e.1).sum();
        Counters::add(&self.counters.query_flips, flips as u64);
        if self.config.auto_merge {
            for (i, (bits, f)) in evals.iter().enumerate() {
                if *f > self.config.merge_threshold {
                    let donation = (versions.len() == 1).then(|| Donation {
                        q: snap.start_ts,
                        base_ts: versions[i].commit_ts,
                        bits: bits.clone(),
                    });
                    self.request_merge(Slot::from_index((first - 1) as usize + i), donation);
                }
            }
        }
        let bits = if evals.len() == 1 {
            evals.into_iter().next().expect("one").0
        } else {
            let refs: Vec<&SegmentedBitvector> = evals.iter().map(|e| &e.0).collect();
            SegmentedBitvector::combine_with(BitOp::Or, &refs, &self.exec, Some(&self.combine_counters))
                .expect("all values share one shape")
        };
        QueryResult {
            bits: ResultBits::Segmented(bits),
            start_ts: Some(snap.start_ts),
        }
    }

    pub(crate) fn row_view(&self, row: RowId, snap: &Snapshot<'_>) -> Result<RowView> {
        let n = snap.end.n_rows_after;
        if row >= n {
            return Err(Error::RowOutOfRange { row, n_rows: n });
        }
        let c = self.chains.len();
        if c == 0 {
            return Ok(RowView {
                slot: None,
                eff: Positions::new(),
            });
        }
        let versions = self.versions_at(1..=c as u32, snap);
        let window = self.window_for(&versions, snap, Some(row));
        let latest = window.latest.first().map(|&(_, ts, cell, _)| (ts, cell));
        let eff: Positions = match latest {
            Some((ts, Some(cell))) => cell
                .hud
                .positions()
                .iter()
                .copied()
                .filter(|&p| ts > versions[p as usize - 1].commit_ts)
                .collect(),
            _ => Positions::new(),
        };
        let bits = par_map(&self.exec, c, |i| {
            versions[i].bits.get(row) ^ eff.binary_search(&(i as u32 + 1)).is_ok()
        });
        let mut set = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| Slot::from_index(i));
        let slot = set.next();
        debug_assert!(set.next().is_none(), "row {row} has more than one value");
        Ok(RowView { slot, eff })
    }

    /// Update (`Some`) or delete (`None`) of an existing row.
    pub(crate) fn modify_row(&self, row: RowId, new: Option<Slot>) -> Result<u64> {
        let backoff = Backoff::new();
        loop {
            let g = self.domain.pin();
            let snap = self.snapshot(&g);
            let view = self.row_view(row, &snap)?;
            let cur = view.slot.ok_or(Error::NotFound(row))?;
            let delta: Positions = match new {
                Some(s) if s == cur => return Err(Error::SameValue(row)),
                Some(s) => {
                    let (a, b) = if cur < s { (cur, s) } else { (s, cur) };
                    Positions::from_slice(&[a.get(), b.get()])
                }
                None => Positions::from_slice(&[cur.get()]),
            };
            let hud = Hud::from_positions(row, xor_positions(&view.eff, &delta));
            match self.commit_udi(UdiPayload::Row(hud), snap.end, &g) {
                Ok(c) => return Ok(c.ts),
                Err(Conflict) => {
                    Counters::bump(&self.counters.restarts);
                    drop(g);
                    if self.config.sync == SyncVariant::Lk {
                        backoff.snooze();
                    }
                }
            }
        }
    }

    pub(crate) fn insert_slot(&self, slot: Slot) -> (RowId, u64) {
        loop {
            let g = self.domain.pin();
            let snap = self.snapshot(&g);
            match self.commit_udi(UdiPayload::Insert(slot), snap.end, &g) {
                Ok(c) => return (c.row.expect("insert assigns a row"), c.ts),
                Err(Conflict) => Counters::bump(&self.counters.restarts),
            }
        }
    }

    pub(crate) fn lookup_slot(&self, row: RowId) -> Result<Option<Slot>> {
        let g = self.domain.pin();
        let snap = self.snapshot(&g);
        Ok(self.row_view(row, &snap)?.slot)
    }

    /// Queues a merge for `slot` unless one is already queued.
    pub(crate) fn request_merge(&self, slot: Slot, donation: Option<Donation>) {
        if self.merge_pending[slot.index()].swap(true, Ordering::AcqRel) {
            return;
        }
        Counters::bump(&self.counters.merge_requests);
        let req = MergeRequest {
            slot,
            donation,
            attempts: 0,
        };
        if self.merge_queue.push(req).is_err() {
            Counters::bump(&self.counters.merge_requests_dropped);
            self.merge_pending[slot.index()].store(false, Ordering::Release);
        }
    }

    /// Folds the pending HUDs of `slot` into a new version. With `allow_empty`
    /// a merge is committed even when nothing is pending, which moves the
    /// version's start point up to the tail.
    pub(crate) fn merge_slot(&self, slot: Slot, donation: Option<Donation>, allow_empty: bool) -> MergeOutcome {
        let g = self.domain.pin();
        let chain = &self.chains[slot.index()];
        let head = chain.head_ref();
        let (end, donated) = match donation {
            Some(d) if d.base_ts == head.commit_ts && d.q >= head.commit_ts => {
                let mut u = head.start_delta_ref();
                while u.commit_ts < d.q {
                    u = u.next_ref().expect("snapshot entries are linked");
                }
                (u, Some(d.bits))
            }
            _ => (self.tail_ref(), None),
        };
        let snap = Snapshot {
            start_ts: end.commit_ts,
            end,
        };
        let base = chain.lookup_in(snap.start_ts);
        let window = scan_window(base.start_delta_ref(), base.commit_ts, snap.start_ts, None);
        let pending = window
            .latest
            .iter()
            .any(|(_, _, c, _)| c.is_some_and(|c| c.hud.contains(slot)));
        if !pending && !allow_empty {
            Counters::bump(&self.counters.merges_noop);
            return MergeOutcome::NothingToMerge;
        }
        let plan = plan_merge(slot, base, &window, donated, self.config.debug_empty_huds, &self.exec);
        let version = Box::into_raw(Box::new(VersionedVb::new(plan.bits.clone(), 0)));
        self.alloc.versions_live.fetch_add(1, Ordering::Relaxed);
        match self.commit_merge(&plan, snap.end, version, &g) {
            Ok(ts) => {
                Counters::bump(&self.counters.merges_committed);
                Counters::bump(&self.counters.versions_installed);
                let len = chain.timestamps().len() as u64;
                self.counters.max_chain_len.fetch_max(len, Ordering::Relaxed);
                MergeOutcome::Committed { ts }
            }
            Err(Conflict) => {
                // SAFETY: never published
                unsafe { drop(Box::from_raw(version)) };
                self.alloc.versions_live.fetch_sub(1, Ordering::Relaxed);
                Counters::bump(&self.counters.merge_conflicts);
                MergeOutcome::Conflict
            }
        }
    }

    /// Frees an object no thread can reach any more. With `checked` it is
    /// poisoned and parked first so late readers trip the canary.
    pub(crate) unsafe fn free(&self, g: Garbage) {
        if cfg!(feature = "checked") {
            match g {
                Garbage::Ule(p) => (*p).poison(),
                Garbage::Version(p) => (*p).poison(),
            }
            let evicted = {
                let mut q = self.quarantine.lock();
                q.push_back(g);
                if q.len() > QUARANTINE_CAP {
                    q.pop_front()
                } else {
                    None
                }
            };
            if let Some(e) = evicted {
                self.free_now(e);
            }
        } else {
            self.free_now(g);
        }
    }

    unsafe fn free_now(&self, g: Garbage) {
        match g {
            Garbage::Ule(p) => self.log.pool.release(p),
            Garbage::Version(p) => {
                drop(Box::from_raw(p));
                self.alloc.versions_live.fetch_sub(1, Ordering::Relaxed);
            }
        }
    }

    /// Frees a version list linked through `prev`. Returns how many.
    pub(crate) unsafe fn free_version_list(&self, mut p: *mut VersionedVb) -> u64 {
        let mut n = 0;
        while !p.is_null() {
            let next = (*p).prev.load(Ordering::Acquire);
            self.free(Garbage::Version(p));
            p = next;
            n += 1;
        }
        n
    }

    /// Frees log entries from `from` up to but excluding `to`.
    pub(crate) unsafe fn free_ule_range(&self, mut from: *mut Ule, to: *mut Ule) -> u64 {
        let mut n = 0;
        while from != to {
            let next = (*from).next.load(Ordering::Acquire);
            self.free(Garbage::Ule(from));
            from = next;
            n += 1;
        }
        n
    }

    pub(crate) fn dump(&self) -> String {
        let _g = self.domain.pin();
        let mut s = String::new();
        // SAFETY: HEAD moves before a prefix is freed, and we are pinned
        let mut u = Some(unsafe { &*self.log.head.load(Ordering::Acquire) });
        while let Some(e) = u {
            e.check();
            s.push_str(&e.dump_line());
            s.push('\n');
            u = e.next_ref();
        }
        s
    }
}

impl Drop for IndexCore {
    fn drop(&mut self) {
        let st = std::mem::take(&mut *self.reclaim.lock());
        // SAFETY: exclusive access; every pointer below is owned by the index
        unsafe {
            for (p, _) in st.versions {
                self.free(Garbage::Version(p));
            }
            if let Some((from, to, _)) = st.ules {
                self.free_ule_range(from, to);
            }
            for c in &self.chains {
                let head = c.head.swap(ptr::null_mut(), Ordering::AcqRel);
                self.free_version_list(head);
            }
            let q = std::mem::take(&mut *self.quarantine.lock());
            for g in q {
                self.free_now(g);
            }
        }
    }
}

/// A concurrent updatable bitmap index over values `V`.
pub struct CubitIndex<V> {
    dict: Dictionary<V>,
    pub(crate) core: IndexCore,
}

impl<V: Value> fmt::Debug for CubitIndex<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CubitIndex")
            .field("values", &self.dict.len())
            .field("rows", &self.n_rows())
            .field("timestamp", &self.timestamp())
            .field("sync", &self.core.config.sync)
            .finish()
    }
}

impl<V: Value> CubitIndex<V> {
    /// Builds over `values`; the domain is the set of distinct values.
    pub fn build(values: &[V], config: IndexConfig) -> Result<Self> {
        Self::build_with_domain(values.iter().cloned(), values, config)
    }

    /// Builds over `values` with an explicit domain, which must contain them all.
    pub fn build_with_domain(domain: impl IntoIterator<Item = V>, values: &[V], config: IndexConfig) -> Result<Self> {
        let dict = Dictionary::new(domain);
        if dict.len() > config.cardinality {
            return Err(Error::Config(format!(
                "{} distinct values exceed cardinality {}",
                dict.len(),
                config.cardinality
            )));
        }
        let ones = column_ones(&dict, values)?;
        let core = IndexCore::new(ones, values.len() as u64, config)?;
        Ok(CubitIndex { dict, core })
    }

    pub fn config(&self) -> &IndexConfig {
        &self.core.config
    }

    pub fn query(&self, pred: &Predicate<V>) -> Result<QueryResult> {
        let slots = self.dict.slots(pred)?;
        Ok(self.core.query_slots(slots))
    }

    /// Pins a read point. Queries through it all see the same state; holding it
    /// delays reclamation.
    pub fn snapshot(&self) -> SnapshotGuard<'_, V> {
        let guard = self.core.domain.pin();
        let end = self.core.pinned_tail(&guard);
        SnapshotGuard {
            index: self,
            start_ts: end.commit_ts,
            end,
            _guard: guard,
        }
    }

    pub fn update(&self, row: RowId, value: &V) -> Result<Commit> {
        let s = self.dict.slot_of(value)?;
        Ok(Commit {
            ts: self.core.modify_row(row, Some(s))?,
        })
    }

    pub fn remove(&self, row: RowId) -> Result<Commit> {
        Ok(Commit {
            ts: self.core.modify_row(row, None)?,
        })
    }

    pub fn insert(&self, value: &V) -> Result<(RowId, Commit)> {
        let s = self.dict.slot_of(value)?;
        let (row, ts) = self.core.insert_slot(s);
        Ok((row, Commit { ts }))
    }

    /// Current value of `row`, `None` once deleted.
    pub fn lookup_value(&self, row: RowId) -> Result<Option<V>> {
        Ok(self.core.lookup_slot(row)?.map(|s| self.dict.value(s).clone()))
    }

    /// Synchronously merges the pending updates of `value`.
    pub fn merge(&self, value: &V) -> Result<MergeOutcome> {
        let s = self.dict.slot_of(value)?;
        Ok(self.core.merge_slot(s, None, false))
    }

    /// Merges every value once, moving every version up to the current tail.
    pub fn merge_all(&self) -> Vec<MergeOutcome> {
        (0..self.dict.len())
            .map(|i| self.core.merge_slot(Slot::from_index(i), None, true))
            .collect()
    }

    pub fn dictionary(&self) -> &Dictionary<V> {
        &self.dict
    }

    /// The Delta Log, one line per entry from HEAD to TAIL.
    pub fn dump_log(&self) -> String {
        self.core.dump()
    }

    /// Copies of the log entries from HEAD to TAIL.
    pub fn log_entries(&self) -> Vec<LogEntry> {
        let _g = self.core.domain.pin();
        let mut out = Vec::new();
        // SAFETY: pinned, and HEAD moves before a prefix is freed
        let mut u = Some(unsafe { &*self.core.log.head.load(Ordering::Acquire) });
        while let Some(e) = u {
            out.push(LogEntry {
                ts: e.commit_ts,
                kind: e.kind,
                huds: e.huds.iter().map(|c| c.hud.clone()).collect(),
                elided_rows: e.elided_rows.clone(),
                merged_slot: e.merged_slot,
            });
            u = e.next_ref();
        }
        out
    }

    pub fn log_len(&self) -> usize {
        self.log_entries().len()
    }

    /// Committed UDI and merge entries.
    pub fn timestamp(&self) -> u64 {
        self.core.timestamp.load(Ordering::Acquire)
    }

    pub fn n_rows(&self) -> u64 {
        self.core.n_rows.load(Ordering::Acquire)
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.core.counters.snapshot()
    }

    /// Outstanding allocations; stays readable after the index is dropped.
    pub fn alloc_stats(&self) -> Arc<AllocStats> {
        self.core.alloc.clone()
    }

    /// `(compressed steps, block steps, operands decompressed)` of range combines.
    pub fn combine_counters(&self) -> (u64, u64, u64) {
        self.core.combine_counters.snapshot()
    }

    /// Versions per value, newest first.
    pub fn chain_timestamps(&self) -> Vec<Vec<u64>> {
        let _g = self.core.domain.pin();
        self.core.chains.iter().map(|c| c.timestamps()).collect()
    }

    pub fn pending_merges(&self) -> usize {
        self.core.merge_queue.len()
    }

    pub fn faults(&self) -> &Faults {
        &self.core.faults
    }
}

/// A pinned read point from [`CubitIndex::snapshot`].
pub struct SnapshotGuard<'i, V> {
    index: &'i CubitIndex<V>,
    start_ts: u64,
    end: &'i Ule,
    _guard: Guard<'i>,
}

impl<V: Value> SnapshotGuard<'_, V> {
    pub fn start_ts(&self) -> u64 {
        self.start_ts
    }

    pub fn query(&self, pred: &Predicate<V>) -> Result<QueryResult> {
        let core = &self.index.core;
        let slots = self.index.dict.slots(pred)?;
        let snap = Snapshot {
            start_ts: self.start_ts,
            end: self.end,
        };
        let first = *slots.start();
        let versions = core.versions_at(slots, &snap);
        let window = core.window_for(&versions, &snap, None);
        let n = snap.end.n_rows_after;
        let parts: Vec<SegmentedBitvector> = versions
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let rows = IndexCore::flipped_rows(&window, Slot::from_index((first - 1) as usize + i), v);
                core.apply_rows(v, &rows, n)
            })
            .collect();
        let refs: Vec<&SegmentedBitvector> = parts.iter().collect();
        let bits = SegmentedBitvector::combine_with(BitOp::Or, &refs, &core.exec, None)?;
        Ok(QueryResult {
            bits: ResultBits::Segmented(bits),
            start_ts: Some(self.start_ts),
        })
    }

    pub fn value_of(&self, row: RowId) -> Result<Option<V>> {
        let snap = Snapshot {
            start_ts: self.start_ts,
            end: self.end,
        };
        Ok(self
            .index
            .core
            .row_view(row, &snap)?
            .slot
            .map(|s| self.index.dict.value(s).clone()))
    }
}

impl<V: Value> BitmapIndex<V> for CubitIndex<V> {
    fn name(&self) -> &'static str {
        match self.core.config.sync {
            SyncVariant::Lk => "cubit-lk",
            SyncVariant::Lf => "cubit-lf",
        }
    }

    fn dictionary(&self) -> &Dictionary<V> {
        &self.dict
    }

    fn query(&self, pred: &Predicate<V>) -> Result<QueryResult> {
        CubitIndex::query(self, pred)
    }

    fn update(&self, row: RowId, value: &V) -> Result<Commit> {
        CubitIndex::update(self, row, value)
    }

    fn remove(&self, row: RowId) -> Result<Commit> {
        CubitIndex::remove(self, row)
    }

    fn insert(&self, value: &V) -> Result<(RowId, Commit)> {
        CubitIndex::insert(self, value)
    }

    fn value_of(&self, row: RowId) -> Result<Option<V>> {
        self.lookup_value(row)
    }

    fn row_count(&self) -> u64 {
        self.n_rows()
    }

    fn counters(&self) -> CounterSnapshot {
        CubitIndex::counters(self)
    }
}
