//! Horizontal update deltas (HUDs) and the Delta Log of UDI log entries (ULEs).

use std::collections::BTreeMap;
use std::fmt;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_queue::SegQueue;
use parking_lot::Mutex;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::stats::AllocStats;
use crate::sync::RedoEntry;

pub type RowId = u64;

/// 1-based position of a value in the ordered domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot(u32);

impl Slot {
    pub fn new(pos: u32) -> Result<Slot> {
        if pos == 0 {
            return Err(Error::InvalidHud("slot positions start at 1".into()));
        }
        Ok(Slot(pos))
    }

    /// Slot for the 0-based domain index `i`.
    pub fn from_index(i: usize) -> Slot {
        Slot(i as u32 + 1)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

pub(crate) type Positions = SmallVec<[u32; 2]>;

/// Which value slots flip for one row, relative to the VB versions current when
/// the HUD was written.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Hud {
    row: RowId,
    positions: Positions,
}

impl Hud {
    pub fn new(row: RowId, positions: &[u32]) -> Result<Hud> {
        if positions.first() == Some(&0) {
            return Err(Error::InvalidHud("slot positions start at 1".into()));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidHud(format!("positions {positions:?} not strictly ascending")));
        }
        Ok(Hud {
            row,
            positions: positions.iter().copied().collect(),
        })
    }

    pub(crate) fn from_positions(row: RowId, positions: Positions) -> Hud {
        debug_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        Hud { row, positions }
    }

    pub fn empty(row: RowId) -> Hud {
        Hud {
            row,
            positions: Positions::new(),
        }
    }

    pub fn row(&self) -> RowId {
        self.row
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn n_ones(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, slot: Slot) -> bool {
        self.positions.binary_search(&slot.0).is_ok()
    }

    /// Whether the positions fit the inline record.
    pub fn is_inline(&self) -> bool {
        !self.positions.spilled()
    }

    pub fn without(&self, slot: Slot) -> Hud {
        Hud {
            row: self.row,
            positions: self.positions.iter().copied().filter(|&p| p != slot.0).collect(),
        }
    }
}

impl fmt::Display for Hud {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}", self.row, self.positions.len())?;
        if self.positions.is_empty() {
            write!(f, ", ∅")?;
        }
        for p in &self.positions {
            write!(f, ", {p}")?;
        }
        write!(f, ">")
    }
}

/// Symmetric difference of two ascending position lists.
pub(crate) fn xor_positions(a: &[u32], b: &[u32]) -> Positions {
    let mut out = Positions::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x == y => {
                i += 1;
                j += 1;
            }
            (Some(&x), Some(&y)) if x < y => {
                out.push(x);
                i += 1;
            }
            (Some(_), Some(&y)) => {
                out.push(y);
                j += 1;
            }
            (Some(&x), None) => {
                out.push(x);
                i += 1;
            }
            (None, Some(&y)) => {
                out.push(y);
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    out
}

pub fn hud_for_update(row: RowId, old: Slot, new: Slot) -> Result<Hud> {
    if old == new {
        return Err(Error::SameValue(row));
    }
    let (a, b) = if old < new { (old, new) } else { (new, old) };
    Ok(Hud::from_positions(row, Positions::from_slice(&[a.0, b.0])))
}

pub fn hud_for_delete(row: RowId, cur: Slot) -> Hud {
    Hud::from_positions(row, Positions::from_slice(&[cur.0]))
}

pub fn hud_for_insert(row: RowId, slot: Slot) -> Hud {
    Hud::from_positions(row, Positions::from_slice(&[slot.0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UleKind {
    #[default]
    Dummy,
    Udi,
    Synthetic,
}

impl fmt::Display for UleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UleKind::Dummy => "dummy",
            UleKind::Udi => "udi",
            UleKind::Synthetic => "synthetic",
        })
    }
}

/// A HUD plus the timestamp of the merge that folded it, 0 while still live.
#[derive(Debug)]
pub struct HudCell {
    pub(crate) hud: Hud,
    pub(crate) invalidated_at: AtomicU64,
}

impl HudCell {
    fn new(hud: Hud) -> Self {
        HudCell {
            hud,
            invalidated_at: AtomicU64::new(0),
        }
    }

    pub fn hud(&self) -> &Hud {
        &self.hud
    }

    /// Whether a snapshot at `ts` still sees this HUD.
    pub fn visible_at(&self, ts: u64) -> bool {
        let inv = self.invalidated_at.load(Ordering::Acquire);
        inv == 0 || inv > ts
    }

    pub fn is_invalidated(&self) -> bool {
        self.invalidated_at.load(Ordering::Acquire) != 0
    }
}

pub(crate) const CANARY_LIVE: u32 = 0xC0B1_7A11;
pub(crate) const CANARY_DEAD: u32 = 0xDEAD_BEEF;

/// One entry of the Delta Log. All plain fields are written before the entry is
/// linked and never change while it is reachable.
#[derive(Debug, Default)]
pub struct Ule {
    canary: AtomicU32,
    pub(crate) kind: UleKind,
    pub(crate) commit_ts: u64,
    pub(crate) n_rows_after: u64,
    pub(crate) huds: Vec<HudCell>,
    /// Rows whose residual after a merge is empty; they behave like `<row, 0, ∅>`.
    pub(crate) elided_rows: Vec<RowId>,
    pub(crate) merged_slot: Option<Slot>,
    pub(crate) live_huds: AtomicUsize,
    pub(crate) next: AtomicPtr<Ule>,
    pub(crate) descriptor: Vec<RedoEntry>,
    pub(crate) applied: AtomicBool,
}

impl Ule {
    #[inline]
    pub(crate) fn check(&self) {
        if cfg!(feature = "checked") {
            let c = self.canary.load(Ordering::Relaxed);
            assert_eq!(c, CANARY_LIVE, "use of a reclaimed ULE (canary {c:#x})");
        }
    }

    pub(crate) fn poison(&self) {
        self.canary.store(CANARY_DEAD, Ordering::Relaxed);
    }

    pub fn kind(&self) -> UleKind {
        self.kind
    }

    pub fn commit_ts(&self) -> u64 {
        self.commit_ts
    }

    pub fn n_rows_after(&self) -> u64 {
        self.n_rows_after
    }

    pub fn hud_cells(&self) -> &[HudCell] {
        &self.huds
    }

    pub fn elided_rows(&self) -> &[RowId] {
        &self.elided_rows
    }

    pub fn merged_slot(&self) -> Option<Slot> {
        self.merged_slot
    }

    /// True once every HUD carried by this entry has been folded by a merge.
    pub fn fully_invalidated(&self) -> bool {
        self.live_huds.load(Ordering::Acquire) == 0
    }

    #[inline]
    pub(crate) fn next_ptr(&self) -> *mut Ule {
        self.next.load(Ordering::Acquire)
    }

    /// Successor, if linked. Dereferencing relies on the caller's pin or exclusive access.
    #[inline]
    pub(crate) fn next_ref<'a>(&self) -> Option<&'a Ule> {
        let p = self.next_ptr();
        // SAFETY: entries stay allocated while the caller is pinned or owns the log.
        unsafe { p.as_ref() }.inspect(|u| u.check())
    }

    fn reset(&mut self) {
        self.kind = UleKind::Dummy;
        self.commit_ts = 0;
        self.n_rows_after = 0;
        self.huds.clear();
        self.elided_rows.clear();
        self.merged_slot = None;
        *self.live_huds.get_mut() = 0;
        *self.next.get_mut() = ptr::null_mut();
        self.descriptor.clear();
        *self.applied.get_mut() = false;
        *self.canary.get_mut() = CANARY_LIVE;
    }

    /// Overwrites the contents of a private (unlinked) entry.
    pub(crate) fn fill(&mut self, draft: UleDraft) {
        self.reset();
        self.kind = draft.kind;
        self.n_rows_after = draft.n_rows_after;
        self.huds.extend(draft.huds.into_iter().map(HudCell::new));
        *self.live_huds.get_mut() = self.huds.len();
        self.elided_rows = draft.elided_rows;
        self.merged_slot = draft.merged_slot;
    }

    pub fn dump_line(&self) -> String {
        let mut s = format!("ts={} kind={} huds=[", self.commit_ts, self.kind);
        let mut first = true;
        let mut push = |row: RowId, pos: &[u32], s: &mut String| {
            if !first {
                s.push(' ');
            }
            first = false;
            s.push_str(&row.to_string());
            s.push(':');
            s.push_str(&pos.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","));
        };
        for c in &self.huds {
            push(c.hud.row, &c.hud.positions, &mut s);
        }
        for &r in &self.elided_rows {
            push(r, &[], &mut s);
        }
        s.push(']');
        s
    }
}

/// Contents of a ULE before it is placed into pool storage.
#[derive(Debug, Clone, Default)]
pub struct UleDraft {
    pub kind: UleKind,
    pub n_rows_after: u64,
    pub huds: Vec<Hud>,
    pub elided_rows: Vec<RowId>,
    pub merged_slot: Option<Slot>,
}

struct PoolPtr(*mut Ule);
// SAFETY: pool entries are handed to one owner at a time.
unsafe impl Send for PoolPtr {}

/// Pre-allocated ULE storage, carved from contiguous chunks and recycled through
/// a lock-free free list.
pub(crate) struct UlePool {
    free: SegQueue<PoolPtr>,
    chunks: Mutex<Vec<Box<[Ule]>>>,
    chunk_len: usize,
    pub(crate) stats: Arc<AllocStats>,
}

impl UlePool {
    pub(crate) fn new(chunk_len: usize, stats: Arc<AllocStats>) -> Self {
        UlePool {
            free: SegQueue::new(),
            chunks: Mutex::new(Vec::new()),
            chunk_len: chunk_len.max(1),
            stats,
        }
    }

    pub(crate) fn alloc(&self) -> *mut Ule {
        self.stats.ules_live.fetch_add(1, Ordering::Relaxed);
        loop {
            if let Some(PoolPtr(p)) = self.free.pop() {
                // SAFETY: free-list entries are owned by the pool and unreachable.
                unsafe { (*p).reset() };
                return p;
            }
            let mut chunks = self.chunks.lock();
            if !self.free.is_empty() {
                continue;
            }
            let mut chunk: Box<[Ule]> = (0..self.chunk_len).map(|_| Ule::default()).collect();
            let base = chunk.as_mut_ptr();
            for i in 1..self.chunk_len {
                // SAFETY: i < chunk_len
                self.free.push(PoolPtr(unsafe { base.add(i) }));
            }
            chunks.push(chunk);
            // SAFETY: base points at element 0 of the new chunk
            unsafe { (*base).reset() };
            return base;
        }
    }

    /// Returns an entry that is unreachable from every thread.
    pub(crate) unsafe fn release(&self, p: *mut Ule) {
        (*p).poison();
        (*p).huds.clear();
        (*p).descriptor.clear();
        self.stats.ules_live.fetch_sub(1, Ordering::Relaxed);
        self.free.push(PoolPtr(p));
    }

    #[cfg(test)]
    pub(crate) fn capacity(&self) -> usize {
        self.chunks.lock().len() * self.chunk_len
    }
}

/// The append-only, timestamp-ordered chain of ULEs.
pub struct DeltaLog {
    pub(crate) head: AtomicPtr<Ule>,
    pub(crate) tail: AtomicPtr<Ule>,
    pub(crate) pool: UlePool,
}

// SAFETY: all shared mutation goes through atomics; entries are pool-owned.
unsafe impl Send for DeltaLog {}
unsafe impl Sync for DeltaLog {}

impl fmt::Debug for DeltaLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeltaLog")
            .field("head_ts", &self.head().commit_ts)
            .field("tail_ts", &self.tail().commit_ts)
            .finish()
    }
}

impl DeltaLog {
    /// A log holding only the dummy entry at ts 0, for `n_rows` initial rows.
    pub fn new(n_rows: u64) -> Self {
        Self::with_pool(n_rows, 1024, Arc::default())
    }

    pub(crate) fn with_pool(n_rows: u64, chunk: usize, stats: Arc<AllocStats>) -> Self {
        let pool = UlePool::new(chunk, stats);
        let d = pool.alloc();
        // SAFETY: freshly allocated and private
        unsafe {
            (*d).fill(UleDraft {
                kind: UleKind::Dummy,
                n_rows_after: n_rows,
                ..Default::default()
            });
            (*d).applied = AtomicBool::new(true);
        }
        DeltaLog {
            head: AtomicPtr::new(d),
            tail: AtomicPtr::new(d),
            pool,
        }
    }

    pub fn head(&self) -> &Ule {
        // SAFETY: head is never null and stays allocated while borrowed through the log
        unsafe { &*self.head.load(Ordering::Acquire) }
    }

    pub fn tail(&self) -> &Ule {
        // SAFETY: as for head
        unsafe { &*self.tail.load(Ordering::Acquire) }
    }

    /// Iterates entries from HEAD to TAIL.
    pub fn iter(&self) -> UleIter<'_> {
        UleIter {
            cur: Some(self.head()),
        }
    }

    /// Links `draft` after the tail with `commit_ts = tail.commit_ts + 1`.
    /// Exclusive access stands in for the commit protocol.
    pub fn append_unsynchronized(&mut self, draft: UleDraft) -> &Ule {
        let p = self.pool.alloc();
        let tail = self.tail.load(Ordering::Relaxed);
        // SAFETY: p is private; tail is live and we hold the log exclusively
        unsafe {
            (*p).fill(draft);
            (*p).commit_ts = (*tail).commit_ts + 1;
            *(*p).applied.get_mut() = true;
            (*tail).next.store(p, Ordering::Release);
        }
        self.tail.store(p, Ordering::Release);
        // SAFETY: just linked
        unsafe { &*p }
    }

    /// Flags the HUDs of `rows` in `ule` as folded by a merge committed at `merge_ts`.
    pub fn invalidate_merged(&self, ule: &Ule, rows: &[RowId], merge_ts: u64) {
        for cell in &ule.huds {
            if rows.contains(&cell.hud.row) {
                invalidate_cell(ule, cell, merge_ts);
            }
        }
    }

    /// Collects the latest HUD per row among entries with commit_ts in `(lo, hi]`,
    /// starting the walk at `from`. With `filter`, HUDs not touching the slot are
    /// dropped after deduplication.
    pub fn collect(&self, from: &Ule, lo: u64, hi: u64, filter: Option<Slot>) -> HudSet {
        collect_from(from, lo, hi, filter)
    }

    /// One line per entry, HEAD to TAIL.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for u in self.iter() {
            s.push_str(&u.dump_line());
            s.push('\n');
        }
        s
    }
}

pub(crate) fn invalidate_cell(ule: &Ule, cell: &HudCell, merge_ts: u64) -> bool {
    let ok = cell
        .invalidated_at
        .compare_exchange(0, merge_ts, Ordering::AcqRel, Ordering::Acquire)
        .is_ok();
    if ok {
        ule.live_huds.fetch_sub(1, Ordering::AcqRel);
    }
    ok
}

impl Drop for DeltaLog {
    fn drop(&mut self) {
        let mut p = *self.head.get_mut();
        while !p.is_null() {
            // SAFETY: exclusive access; every linked entry is pool-owned
            unsafe {
                let next = *(*p).next.get_mut();
                self.pool.release(p);
                p = next;
            }
        }
    }
}

pub struct UleIter<'a> {
    cur: Option<&'a Ule>,
}

impl<'a> Iterator for UleIter<'a> {
    type Item = &'a Ule;

    fn next(&mut self) -> Option<&'a Ule> {
        let u = self.cur?;
        self.cur = u.next_ref();
        Some(u)
    }
}

/// Latest-wins set of HUDs, keyed by row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HudSet {
    map: BTreeMap<RowId, Hud>,
}

impl HudSet {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, row: RowId) -> Option<&Hud> {
        self.map.get(&row)
    }

    /// HUDs in ascending row order.
    pub fn iter(&self) -> impl Iterator<Item = &Hud> {
        self.map.values()
    }

    /// Later-wins union: entries of `later` replace those of `self`.
    pub fn union_latest(mut self, later: &HudSet) -> HudSet {
        for (r, h) in &later.map {
            self.map.insert(*r, h.clone());
        }
        self
    }

    pub fn filtered(&self, slot: Slot) -> HudSet {
        HudSet {
            map: self
                .map
                .iter()
                .filter(|(_, h)| h.contains(slot))
                .map(|(r, h)| (*r, h.clone()))
                .collect(),
        }
    }
}

pub(crate) fn collect_from(from: &Ule, lo: u64, hi: u64, filter: Option<Slot>) -> HudSet {
    let mut map = BTreeMap::new();
    let mut u = Some(from);
    while let Some(e) = u {
        if e.commit_ts > hi {
            break;
        }
        if e.commit_ts > lo {
            for c in &e.huds {
                if c.visible_at(hi) {
                    map.insert(c.hud.row, c.hud.clone());
                }
            }
            for &r in &e.elided_rows {
                map.insert(r, Hud::empty(r));
            }
        }
        if e.commit_ts == hi {
            break;
        }
        u = e.next_ref();
    }
    if let Some(s) = filter {
        map.retain(|_, h: &mut Hud| h.contains(s));
    }
    HudSet { map }
}

/// Latest entry per row in a window, borrowed from the log.
pub(crate) struct Window<'g> {
    /// Ascending by row; `None` marks an elided (empty) residual.
    pub(crate) latest: Vec<(RowId, u64, Option<&'g HudCell>, &'g Ule)>,
    /// The entry whose commit_ts equals the window's upper bound.
    pub(crate) end: &'g Ule,
}

impl<'g> Window<'g> {
    pub(crate) fn n_rows(&self) -> u64 {
        self.end.n_rows_after
    }
}

/// Walks from `from` over entries in `(lo, hi]`, keeping the latest visible entry
/// per row, optionally restricted to one row.
pub(crate) fn scan_window<'g>(from: &'g Ule, lo: u64, hi: u64, row: Option<RowId>) -> Window<'g> {
    let mut all: Vec<(RowId, u64, Option<&'g HudCell>, &'g Ule)> = Vec::new();
    let mut u = from;
    u.check();
    loop {
        if u.commit_ts > lo {
            for c in &u.huds {
                if row.is_none_or(|r| r == c.hud.row) && c.visible_at(hi) {
                    all.push((c.hud.row, u.commit_ts, Some(c), u));
                }
            }
            for &r in &u.elided_rows {
                if row.is_none_or(|x| x == r) {
                    all.push((r, u.commit_ts, None, u));
                }
            }
        }
        if u.commit_ts >= hi {
            debug_assert_eq!(u.commit_ts, hi, "window end entry missing");
            break;
        }
        u = u.next_ref().expect("entries up to the snapshot timestamp are linked");
    }
    // entries were pushed in commit order, so position breaks ties by ts
    let mut keys: Vec<u128> = all.iter().enumerate().map(|(i, e)| (e.0 as u128) << 64 | i as u128).collect();
    keys.sort_unstable();
    let mut latest: Vec<(RowId, u64, Option<&'g HudCell>, &'g Ule)> = Vec::with_capacity(keys.len());
    for k in keys {
        let e = all[k as u64 as usize];
        match latest.last_mut() {
            Some(l) if l.0 == e.0 => *l = e,
            _ => latest.push(e),
        }
    }
    Window { latest, end: u }
}
