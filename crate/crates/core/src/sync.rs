//! UDI and merge commit protocols: latch-based (`lk`) with a consolidation
//! array, and latch-free (`lf`) with helping through redo descriptors.

use std::collections::HashSet;
use std::fmt;
use std::ptr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use crossbeam_utils::Backoff;
use parking_lot::{Mutex, MutexGuard};

use crate::delta::{hud_for_insert, invalidate_cell, Hud, RowId, Slot, Ule, UleDraft, UleKind};
use crate::error::Error;
use crate::fault::FaultPoint;
use crate::index::IndexCore;
use crate::reclaim::Guard;
use crate::stats::{self, Counters};
use crate::version::{cell_of, MergePlan, VersionedVb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SyncVariant {
    /// Commits serialized by one latch; contended committers consolidate.
    Lk,
    /// Commits linked by compare-and-swap; losers help the winner finish.
    #[default]
    Lf,
}

impl fmt::Display for SyncVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyncVariant::Lk => "lk",
            SyncVariant::Lf => "lf",
        })
    }
}

impl FromStr for SyncVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "lk" => Ok(SyncVariant::Lk),
            "lf" => Ok(SyncVariant::Lf),
            other => Err(Error::Config(format!("unknown sync variant {other:?}"))),
        }
    }
}

/// A shared variable a committed ULE still has to update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SharedVar {
    /// Invalidation flag of HUD `hud` in the ULE at address `ule`.
    HudFlag { ule: usize, hud: u32 },
    ChainHead(Slot),
    NRows,
    Timestamp,
    Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RedoEntry {
    pub var: SharedVar,
    pub old: u64,
    pub new: u64,
}

/// Something that can compare-and-swap the shared variables named in a descriptor.
pub trait SharedVarTarget {
    fn cas(&self, var: SharedVar, old: u64, new: u64) -> bool;
}

/// Applies every entry in order; a failed swap means some other thread already
/// did it and is skipped. Returns how many swaps this call performed.
pub fn apply_descriptor<T: SharedVarTarget + ?Sized>(entries: &[RedoEntry], target: &T) -> usize {
    entries
        .iter()
        .filter(|e| target.cas(e.var, e.old, e.new))
        .count()
}

impl SharedVarTarget for IndexCore {
    fn cas(&self, var: SharedVar, old: u64, new: u64) -> bool {
        let swap = |a: &AtomicU64| {
            a.compare_exchange(old, new, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
        };
        match var {
            SharedVar::HudFlag { ule, hud } => {
                // SAFETY: descriptors only name entries in the committing merge's
                // window, which stay allocated while any helper is pinned
                let u = unsafe { &*(ule as *const Ule) };
                u.check();
                debug_assert_eq!(old, 0);
                invalidate_cell(u, cell_of(u, hud), new)
            }
            SharedVar::ChainHead(s) => self.chains[s.index()]
                .head
                .compare_exchange(
                    old as usize as *mut VersionedVb,
                    new as usize as *mut VersionedVb,
                    Ordering::AcqRel,
                    Ordering::Acquire,
                )
                .is_ok(),
            SharedVar::NRows => swap(&self.n_rows),
            SharedVar::Timestamp => swap(&self.timestamp),
            SharedVar::Tail => self
                .log
                .tail
                .compare_exchange(
                    old as usize as *mut Ule,
                    new as usize as *mut Ule,
                    Ordering::AcqRel,
                    Ordering::Acquire,
                )
                .is_ok(),
        }
    }
}

/// The commit latch. Counts acquisitions, separately when taken on a query path.
#[derive(Debug, Default)]
pub(crate) struct Latch {
    m: Mutex<()>,
}

impl Latch {
    fn note(c: &Counters) {
        Counters::bump(&c.latch_acquisitions);
        if stats::in_query() {
            Counters::bump(&c.query_latch_acquisitions);
        }
    }

    pub(crate) fn try_lock(&self, c: &Counters) -> Option<MutexGuard<'_, ()>> {
        let g = self.m.try_lock();
        if g.is_some() {
            Self::note(c);
        }
        g
    }

    pub(crate) fn lock(&self, c: &Counters) -> MutexGuard<'_, ()> {
        let g = self.m.lock();
        Self::note(c);
        g
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum UdiPayload {
    /// Update or delete of an existing row.
    Row(Hud),
    Insert(Slot),
}

/// The commit lost to a conflicting entry and must restart from a fresh snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conflict;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Committed {
    pub(crate) ts: u64,
    pub(crate) row: Option<RowId>,
}

const PENDING: u8 = 0;
const DONE: u8 = 1;
const CONFLICTED: u8 = 2;

/// A blocked committer's request, parked in the consolidation array.
pub(crate) struct Deposit {
    payload: UdiPayload,
    snapshot_tail: *const Ule,
    state: AtomicU8,
    ts: AtomicU64,
    row: AtomicU64,
}

// SAFETY: snapshot_tail stays valid while the depositor is pinned, which it is
// until the deposit completes.
unsafe impl Send for Deposit {}
unsafe impl Sync for Deposit {}

enum Content<'a, 'g> {
    Udi(&'a [(&'a UdiPayload, &'g Ule)]),
    Merge(&'a MergePlan<'g>),
}

/// Row-granularity conflict test of one UDI against one committed entry.
fn udi_hits(row: RowId, u: &Ule) -> bool {
    u.huds.iter().any(|c| c.hud.row() == row) || u.elided_rows.contains(&row)
}

fn merge_hits(plan: &MergePlan<'_>, u: &Ule) -> bool {
    u.merged_slot == Some(plan.slot)
        || u.huds.iter().any(|c| {
            c.hud.contains(plan.slot) || plan.merged_rows.binary_search(&c.hud.row()).is_ok()
        })
        || u.elided_rows.iter().any(|r| plan.merged_rows.binary_search(r).is_ok())
}

/// Whether any entry after `from` up to and including `to` conflicts with `row`.
pub(crate) fn row_conflicts(row: RowId, from: &Ule, to: &Ule) -> bool {
    let mut u = from;
    while u.commit_ts < to.commit_ts {
        u = u.next_ref().expect("entries up to the tail are linked");
        if udi_hits(row, u) {
            return true;
        }
    }
    false
}

fn merge_conflicts(plan: &MergePlan<'_>, from: &Ule, to: &Ule) -> bool {
    let mut u = from;
    while u.commit_ts < to.commit_ts {
        u = u.next_ref().expect("entries up to the tail are linked");
        if merge_hits(plan, u) {
            return true;
        }
    }
    false
}

/// True iff an entry in `(from.commit_ts, to.commit_ts]` carries a HUD (or an
/// elided residual) for one of `rows`.
pub fn conflict_check(from: &Ule, to: &Ule, rows: &[RowId]) -> bool {
    rows.iter().any(|&r| row_conflicts(r, from, to))
}

impl IndexCore {
    #[inline]
    pub(crate) fn tail_ref<'g>(&self) -> &'g Ule {
        // SAFETY: the tail is never reclaimed
        let u = unsafe { &*self.log.tail.load(Ordering::Acquire) };
        u.check();
        u
    }

    /// Completes `u`'s descriptor if nobody has yet.
    fn help(&self, u: &Ule, own: bool) {
        if u.applied.load(Ordering::Acquire) {
            return;
        }
        if !own {
            Counters::bump(&self.counters.helps);
        }
        apply_descriptor(&u.descriptor, self);
        u.applied.store(true, Ordering::Release);
    }

    /// Returns the tail once every linked entry's effects are complete.
    fn help_to_tail<'g>(&self) -> &'g Ule {
        loop {
            let t = self.tail_ref();
            match t.next_ref() {
                None => return t,
                Some(n) => self.help(n, false),
            }
        }
    }

    /// Fills a private entry for commit right after `t`. Returns the timestamp
    /// and the first inserted row.
    fn stage<'g>(
        &self,
        ule: *mut Ule,
        t: &'g Ule,
        content: &Content<'_, 'g>,
        version: *mut VersionedVb,
    ) -> Result<(u64, Option<RowId>), Conflict> {
        let ts = t.commit_ts + 1;
        let n = self.n_rows.load(Ordering::Acquire);
        let mut descriptor = Vec::new();
        let mut first_row = None;
        let draft = match content {
            Content::Udi(ops) => {
                let mut huds = Vec::with_capacity(ops.len());
                let mut inserts = 0u64;
                for (p, _) in ops.iter() {
                    match p {
                        UdiPayload::Row(h) => huds.push(h.clone()),
                        UdiPayload::Insert(s) => {
                            first_row.get_or_insert(n);
                            huds.push(hud_for_insert(n + inserts, *s));
                            inserts += 1;
                        }
                    }
                }
                if inserts > 0 {
                    descriptor.push(RedoEntry {
                        var: SharedVar::NRows,
                        old: n,
                        new: n + inserts,
                    });
                }
                UleDraft {
                    kind: UleKind::Udi,
                    n_rows_after: n + inserts,
                    huds,
                    ..Default::default()
                }
            }
            Content::Merge(plan) => {
                let chain = &self.chains[plan.slot.index()];
                let head = chain.head.load(Ordering::Acquire);
                if !ptr::eq(head, plan.base) {
                    return Err(Conflict);
                }
                for &(u, i) in &plan.invalidate {
                    descriptor.push(RedoEntry {
                        var: SharedVar::HudFlag {
                            ule: u as *const Ule as usize,
                            hud: i,
                        },
                        old: 0,
                        new: ts,
                    });
                }
                // SAFETY: version is private until the descriptor publishes it
                unsafe {
                    (*version).commit_ts = ts;
                    (*version).prev.store(head, Ordering::Relaxed);
                    (*version).start_delta.store(ule, Ordering::Relaxed);
                }
                descriptor.push(RedoEntry {
                    var: SharedVar::ChainHead(plan.slot),
                    old: head as usize as u64,
                    new: version as usize as u64,
                });
                UleDraft {
                    kind: UleKind::Synthetic,
                    n_rows_after: n,
                    huds: plan.residual.clone(),
                    elided_rows: plan.elided.clone(),
                    merged_slot: Some(plan.slot),
                }
            }
        };
        descriptor.push(RedoEntry {
            var: SharedVar::Timestamp,
            old: t.commit_ts,
            new: ts,
        });
        descriptor.push(RedoEntry {
            var: SharedVar::Tail,
            old: t as *const Ule as usize as u64,
            new: ule as usize as u64,
        });
        // SAFETY: ule is private until linked
        unsafe {
            (*ule).fill(draft);
            (*ule).commit_ts = ts;
            (*ule).descriptor = descriptor;
        }
        Ok((ts, first_row))
    }

    fn conflicts(&self, content: &Content<'_, '_>, from: &Ule, to: &Ule) -> bool {
        match content {
            Content::Udi(ops) => ops.iter().any(|(p, _)| match p {
                UdiPayload::Row(h) => row_conflicts(h.row(), from, to),
                UdiPayload::Insert(_) => false,
            }),
            Content::Merge(plan) => merge_conflicts(plan, from, to),
        }
    }

    fn commit_lf<'g>(
        &self,
        content: &Content<'_, 'g>,
        snapshot_tail: &'g Ule,
        version: *mut VersionedVb,
    ) -> Result<(u64, Option<RowId>), Conflict> {
        let ule = self.log.pool.alloc();
        let mut checked = snapshot_tail;
        loop {
            let t = self.help_to_tail();
            let staged = if self.conflicts(content, checked, t) {
                Err(Conflict)
            } else {
                self.stage(ule, t, content, version)
            };
            let staged = match staged {
                Ok(s) => s,
                Err(c) => {
                    // SAFETY: never linked
                    unsafe { self.log.pool.release(ule) };
                    return Err(c);
                }
            };
            checked = t;
            if t.next
                .compare_exchange(ptr::null_mut(), ule, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                self.faults.hit(FaultPoint::AfterLink);
                // SAFETY: linked and pinned
                self.help(unsafe { &*ule }, true);
                return Ok(staged);
            }
            Counters::bump(&self.counters.tail_cas_failures);
        }
    }

    /// Links under the latch. The caller holds it.
    fn link_locked<'g>(
        &self,
        content: &Content<'_, 'g>,
        version: *mut VersionedVb,
    ) -> Result<(u64, Option<RowId>), Conflict> {
        let t = self.tail_ref();
        debug_assert!(t.next_ref().is_none());
        let ule = self.log.pool.alloc();
        match self.stage(ule, t, content, version) {
            Ok(staged) => {
                t.next.store(ule, Ordering::Release);
                self.faults.hit(FaultPoint::AfterLink);
                // SAFETY: linked
                self.help(unsafe { &*ule }, true);
                Ok(staged)
            }
            Err(c) => {
                // SAFETY: never linked
                unsafe { self.log.pool.release(ule) };
                Err(c)
            }
        }
    }

    fn record_udi(&self, p: &UdiPayload) {
        Counters::bump(&self.counters.udi_commits);
        let n = match p {
            UdiPayload::Row(h) => {
                if !h.is_inline() {
                    Counters::bump(&self.counters.overflow_huds);
                }
                h.n_ones()
            }
            UdiPayload::Insert(_) => 1,
        };
        self.counters.record_hud_size(n);
    }

    pub(crate) fn commit_udi<'g>(
        &self,
        payload: UdiPayload,
        snapshot_tail: &'g Ule,
        _g: &'g Guard<'_>,
    ) -> Result<Committed, Conflict> {
        let r = match self.config.sync {
            SyncVariant::Lf => {
                let ops = [(&payload, snapshot_tail)];
                self.commit_lf(&Content::Udi(&ops), snapshot_tail, ptr::null_mut())
                    .map(|(ts, row)| Committed { ts, row })
            }
            SyncVariant::Lk => self.commit_lk(&payload, snapshot_tail),
        };
        if r.is_ok() {
            if self.config.sync == SyncVariant::Lf {
                // lk counts once per batch
                Counters::bump(&self.counters.ules_committed);
            }
            self.record_udi(&payload);
        }
        r
    }

    fn commit_lk(&self, payload: &UdiPayload, snapshot_tail: &Ule) -> Result<Committed, Conflict> {
        let backoff = Backoff::new();
        let mut fails = 0u32;
        loop {
            if let Some(l) = self.latch.try_lock(&self.counters) {
                return self
                    .run_batch(Some((payload, snapshot_tail)), l)
                    .expect("own request is part of the batch");
            }
            fails += 1;
            if fails >= self.config.consolidate_after {
                return self.deposit_and_wait(payload, snapshot_tail);
            }
            backoff.snooze();
        }
    }

    fn deposit_and_wait(&self, payload: &UdiPayload, snapshot_tail: &Ule) -> Result<Committed, Conflict> {
        let d = Arc::new(Deposit {
            payload: payload.clone(),
            snapshot_tail,
            state: AtomicU8::new(PENDING),
            ts: AtomicU64::new(0),
            row: AtomicU64::new(u64::MAX),
        });
        self.deposits.lock().push(d.clone());
        let mut spins = 0u32;
        loop {
            match d.state.load(Ordering::Acquire) {
                DONE => {
                    let row = d.row.load(Ordering::Relaxed);
                    return Ok(Committed {
                        ts: d.ts.load(Ordering::Relaxed),
                        row: (row != u64::MAX).then_some(row),
                    });
                }
                CONFLICTED => return Err(Conflict),
                _ => {}
            }
            spins += 1;
            if spins.is_multiple_of(8) {
                if let Some(l) = self.latch.try_lock(&self.counters) {
                    self.run_batch(None, l);
                    continue;
                }
            }
            std::thread::yield_now();
        }
    }

    /// Under the latch: commits the caller's request together with every parked
    /// deposit as one ULE. Returns the caller's outcome.
    fn run_batch(
        &self,
        own: Option<(&UdiPayload, &Ule)>,
        _latch: MutexGuard<'_, ()>,
    ) -> Option<Result<Committed, Conflict>> {
        let deposits: Vec<Arc<Deposit>> = std::mem::take(&mut *self.deposits.lock());
        let t = self.tail_ref();
        let mut taken: HashSet<RowId> = HashSet::new();
        // (payload, snapshot tail, index into outcomes)
        let mut accepted: Vec<(&UdiPayload, &Ule)> = Vec::new();
        let mut who: Vec<usize> = Vec::new();
        let n_ops = own.is_some() as usize + deposits.len();
        let mut outcome: Vec<Option<Result<Committed, Conflict>>> = vec![None; n_ops];
        let ops = own.into_iter().chain(deposits.iter().map(|d| {
            // SAFETY: the depositor is pinned until its deposit completes
            (&d.payload, unsafe { &*d.snapshot_tail })
        }));
        for (i, (p, snap)) in ops.enumerate() {
            let ok = match p {
                UdiPayload::Row(h) => taken.insert(h.row()) && !row_conflicts(h.row(), snap, t),
                UdiPayload::Insert(_) => true,
            };
            if ok {
                accepted.push((p, snap));
                who.push(i);
            } else {
                outcome[i] = Some(Err(Conflict));
            }
        }
        if !accepted.is_empty() {
            let (ts, first_row) = self
                .link_locked(&Content::Udi(&accepted), ptr::null_mut())
                .expect("UDI batches never conflict at staging");
            Counters::bump(&self.counters.ules_committed);
            if accepted.len() > 1 {
                Counters::bump(&self.counters.consolidations);
                Counters::add(&self.counters.consolidated_ops, accepted.len() as u64);
            }
            let mut next_row = first_row;
            for (&i, (p, _)) in who.iter().zip(&accepted) {
                let row = match p {
                    UdiPayload::Insert(_) => {
                        let r = next_row.expect("inserts were staged");
                        next_row = Some(r + 1);
                        Some(r)
                    }
                    UdiPayload::Row(_) => None,
                };
                outcome[i] = Some(Ok(Committed { ts, row }));
            }
        }
        let own_outcome = if own.is_some() { outcome[0] } else { None };
        let offset = own.is_some() as usize;
        for (k, d) in deposits.iter().enumerate() {
            match outcome[k + offset].expect("every op resolved") {
                Ok(c) => {
                    // the depositor's thread records its own stats
                    d.ts.store(c.ts, Ordering::Relaxed);
                    if let Some(r) = c.row {
                        d.row.store(r, Ordering::Relaxed);
                    }
                    d.state.store(DONE, Ordering::Release);
                }
                Err(Conflict) => d.state.store(CONFLICTED, Ordering::Release),
            }
        }
        own_outcome
    }

    /// Commits a prepared merge. On success the new version heads its chain.
    pub(crate) fn commit_merge<'g>(
        &self,
        plan: &MergePlan<'g>,
        snapshot_tail: &'g Ule,
        version: *mut VersionedVb,
        _g: &'g Guard<'_>,
    ) -> Result<u64, Conflict> {
        let content = Content::Merge(plan);
        let r = match self.config.sync {
            SyncVariant::Lf => self.commit_lf(&content, snapshot_tail, version).map(|(ts, _)| ts),
            SyncVariant::Lk => {
                let _l = self.latch.lock(&self.counters);
                let t = self.tail_ref();
                if merge_conflicts(plan, snapshot_tail, t) {
                    Err(Conflict)
                } else {
                    self.link_locked(&content, version).map(|(ts, _)| ts)
                }
            }
        };
        if r.is_ok() {
            Counters::bump(&self.counters.ules_committed);
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Plain map of counters standing in for the index's shared variables.
    #[derive(Default)]
    struct Vars {
        vals: Mutex<HashMap<SharedVar, u64>>,
        writes: Mutex<HashMap<SharedVar, u32>>,
    }

    impl SharedVarTarget for Vars {
        fn cas(&self, var: SharedVar, old: u64, new: u64) -> bool {
            let mut v = self.vals.lock();
            let cur = v.entry(var).or_insert(0);
            if *cur == old {
                *cur = new;
                *self.writes.lock().entry(var).or_insert(0) += 1;
                true
            } else {
                false
            }
        }
    }

    fn descriptor() -> Vec<RedoEntry> {
        vec![
            RedoEntry { var: SharedVar::HudFlag { ule: 64, hud: 0 }, old: 0, new: 7 },
            RedoEntry { var: SharedVar::ChainHead(Slot::new(2).unwrap()), old: 0, new: 99 },
            RedoEntry { var: SharedVar::NRows, old: 0, new: 1 },
            RedoEntry { var: SharedVar::Timestamp, old: 0, new: 7 },
            RedoEntry { var: SharedVar::Tail, old: 0, new: 5 },
        ]
    }

    #[test]
    fn descriptor_idempotent_under_concurrent_helpers() {
        for _ in 0..100 {
            let vars = Arc::new(Vars::default());
            let d = Arc::new(descriptor());
            let hs: Vec<_> = (0..4)
                .map(|_| {
                    let (vars, d) = (vars.clone(), d.clone());
                    std::thread::spawn(move || {
                        for _ in 0..3 {
                            apply_descriptor(&d, &*vars);
                        }
                    })
                })
                .collect();
            for h in hs {
                h.join().unwrap();
            }
            let w = vars.writes.lock();
            assert_eq!(w.len(), 5);
            assert!(w.values().all(|&n| n == 1));
            let v = vars.vals.lock();
            for e in descriptor() {
                assert_eq!(v[&e.var], e.new);
            }
        }
    }

    #[test]
    fn sync_variant_parses() {
        assert_eq!("lk".parse::<SyncVariant>().unwrap(), SyncVariant::Lk);
        assert_eq!(SyncVariant::Lf.to_string(), "lf");
        assert!("x".parse::<SyncVariant>().is_err());
    }
}
