//! Per-value chains of bitvector versions, and merge planning.

use std::fmt;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU32, Ordering};

use crate::delta::{Hud, HudCell, RowId, Slot, Ule, Window, CANARY_DEAD, CANARY_LIVE};
use crate::error::{Error, Result};
use crate::segmented::{Executor, SegmentedBitvector};

/// One immutable version of a value bitvector.
pub struct VersionedVb {
    canary: AtomicU32,
    pub(crate) bits: SegmentedBitvector,
    pub(crate) commit_ts: u64,
    pub(crate) prev: AtomicPtr<VersionedVb>,
    pub(crate) start_delta: AtomicPtr<Ule>,
}

impl fmt::Debug for VersionedVb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VersionedVb")
            .field("commit_ts", &self.commit_ts)
            .field("bits", &self.bits)
            .finish()
    }
}

impl VersionedVb {
    pub fn new(bits: SegmentedBitvector, commit_ts: u64) -> Self {
        VersionedVb {
            canary: AtomicU32::new(CANARY_LIVE),
            bits,
            commit_ts,
            prev: AtomicPtr::new(ptr::null_mut()),
            start_delta: AtomicPtr::new(ptr::null_mut()),
        }
    }

    pub(crate) fn with_start(bits: SegmentedBitvector, commit_ts: u64, start: *mut Ule) -> Self {
        let v = Self::new(bits, commit_ts);
        v.start_delta.store(start, Ordering::Relaxed);
        v
    }

    #[inline]
    pub(crate) fn check(&self) {
        if cfg!(feature = "checked") {
            let c = self.canary.load(Ordering::Relaxed);
            assert_eq!(c, CANARY_LIVE, "use of a reclaimed version (canary {c:#x})");
        }
    }

    pub(crate) fn poison(&self) {
        self.canary.store(CANARY_DEAD, Ordering::Relaxed);
    }

    pub fn bits(&self) -> &SegmentedBitvector {
        &self.bits
    }

    pub fn commit_ts(&self) -> u64 {
        self.commit_ts
    }

    #[inline]
    pub(crate) fn prev_ref<'g>(&self) -> Option<&'g VersionedVb> {
        // SAFETY: versions stay allocated while the caller is pinned or owns the chain
        unsafe { self.prev.load(Ordering::Acquire).as_ref() }.inspect(|v| v.check())
    }

    #[inline]
    pub(crate) fn start_delta_ref<'g>(&self) -> &'g Ule {
        // SAFETY: start_delta is set before publication and outlives the version
        let u = unsafe { &*self.start_delta.load(Ordering::Acquire) };
        u.check();
        u
    }
}

/// Newest-first linked list of versions.
pub struct VersionChain {
    pub(crate) head: AtomicPtr<VersionedVb>,
}

// SAFETY: shared mutation is through atomics; versions are immutable once linked.
unsafe impl Send for VersionChain {}
unsafe impl Sync for VersionChain {}

impl fmt::Debug for VersionChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.timestamps()).finish()
    }
}

impl VersionChain {
    pub fn new(base: VersionedVb) -> Self {
        VersionChain {
            head: AtomicPtr::new(Box::into_raw(Box::new(base))),
        }
    }

    #[inline]
    pub(crate) fn head_ref<'g>(&self) -> &'g VersionedVb {
        // SAFETY: the head is never null and never freed while reachable
        let v = unsafe { &*self.head.load(Ordering::Acquire) };
        v.check();
        v
    }

    /// Version with the largest commit_ts `<= ts`, if the chain still holds one.
    pub(crate) fn lookup_opt<'g>(&self, ts: u64) -> Option<&'g VersionedVb> {
        let mut v = self.head_ref();
        while v.commit_ts > ts {
            v = v.prev_ref()?;
        }
        Some(v)
    }

    pub(crate) fn lookup_in<'g>(&self, ts: u64) -> &'g VersionedVb {
        self.lookup_opt(ts)
            .expect("a version visible to every pinned snapshot is retained")
    }

    pub fn head(&self) -> &VersionedVb {
        self.head_ref()
    }

    /// Version with the largest commit_ts `<= ts`.
    pub fn lookup(&self, ts: u64) -> &VersionedVb {
        self.lookup_in(ts)
    }

    /// Pushes a newer version. Rejected when the head already has an equal or
    /// newer timestamp.
    pub fn install(&self, version: Box<VersionedVb>) -> Result<(), (Error, Box<VersionedVb>)> {
        let raw = Box::into_raw(version);
        loop {
            let h = self.head.load(Ordering::Acquire);
            // SAFETY: h is live; raw is private until the CAS succeeds
            unsafe {
                if (*h).commit_ts >= (*raw).commit_ts {
                    let e = Error::StaleInstall {
                        ts: (*raw).commit_ts,
                        head_ts: (*h).commit_ts,
                    };
                    return Err((e, Box::from_raw(raw)));
                }
                (*raw).prev.store(h, Ordering::Relaxed);
            }
            if self
                .head
                .compare_exchange(h, raw, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                return Ok(());
            }
        }
    }

    pub fn timestamps(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut v = Some(self.head_ref());
        while let Some(x) = v {
            out.push(x.commit_ts);
            v = x.prev_ref();
        }
        out
    }

    pub fn len(&self) -> usize {
        self.timestamps().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Drop for VersionChain {
    fn drop(&mut self) {
        let mut p = *self.head.get_mut();
        while !p.is_null() {
            // SAFETY: exclusive access; every version was boxed
            let b = unsafe { Box::from_raw(p) };
            p = b.prev.load(Ordering::Relaxed);
        }
    }
}

/// Everything a merge needs to commit, computed against one snapshot.
pub(crate) struct MergePlan<'g> {
    pub(crate) slot: Slot,
    pub(crate) base: &'g VersionedVb,
    pub(crate) bits: SegmentedBitvector,
    /// Ascending rows folded into `bits`.
    pub(crate) merged_rows: Vec<RowId>,
    pub(crate) residual: Vec<Hud>,
    pub(crate) elided: Vec<RowId>,
    /// HUD cells superseded by this merge.
    pub(crate) invalidate: Vec<(&'g Ule, u32)>,
}

/// Folds the window's HUDs for `slot` into a private copy of `base`.
///
/// `donated` are bits already evaluated for exactly this window. With
/// `debug_empty`, empty residuals become explicit `<row, 0, ∅>` HUDs instead of
/// elided rows.
pub(crate) fn plan_merge<'g>(
    slot: Slot,
    base: &'g VersionedVb,
    window: &Window<'g>,
    donated: Option<SegmentedBitvector>,
    debug_empty: bool,
    exec: &dyn Executor,
) -> MergePlan<'g> {
    let mut merged_rows = Vec::new();
    let mut residual = Vec::new();
    let mut elided = Vec::new();
    for &(row, _, cell, _) in &window.latest {
        let Some(cell) = cell else { continue };
        if !cell.hud.contains(slot) {
            continue;
        }
        merged_rows.push(row);
        let rest = cell.hud.without(slot);
        if rest.is_empty() && !debug_empty {
            elided.push(row);
        } else {
            residual.push(rest);
        }
    }
    let mut invalidate = Vec::new();
    let mut u = base.start_delta_ref();
    loop {
        if u.commit_ts > base.commit_ts {
            for (i, c) in u.huds.iter().enumerate() {
                if !c.is_invalidated() && merged_rows.binary_search(&c.hud.row()).is_ok() {
                    invalidate.push((u, i as u32));
                }
            }
        }
        if std::ptr::eq(u, window.end) {
            break;
        }
        u = u.next_ref().expect("window end is reachable");
    }
    let bits = match donated {
        Some(b) => b,
        None => base
            .bits
            .extended_to(window.n_rows())
            .flip_rows_with(&merged_rows, exec)
            .expect("merged rows are sorted and in range"),
    };
    MergePlan {
        slot,
        base,
        bits,
        merged_rows,
        residual,
        elided,
        invalidate,
    }
}

pub(crate) fn cell_of(u: &Ule, i: u32) -> &HudCell {
    &u.huds[i as usize]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::{Arc, Barrier};

    fn version(ts: u64) -> Box<VersionedVb> {
        Box::new(VersionedVb::new(SegmentedBitvector::new(4, 4, false).unwrap(), ts))
    }

    #[test]
    fn lookup_rule() {
        let c = VersionChain::new(*version(0));
        assert_eq!(c.lookup(7).commit_ts(), 0);
        c.install(version(5)).unwrap();
        assert_eq!(c.lookup(5).commit_ts(), 5);
        assert_eq!(c.lookup(4).commit_ts(), 0);
        assert_eq!(c.timestamps(), vec![5, 0]);
    }

    #[test]
    fn install_rejects_stale() {
        let c = VersionChain::new(*version(0));
        c.install(version(1)).unwrap();
        assert_eq!(c.timestamps(), vec![1, 0]);
        let (e, _) = c.install(version(1)).unwrap_err();
        assert_eq!(e, Error::StaleInstall { ts: 1, head_ts: 1 });
    }

    #[test]
    fn concurrent_double_install() {
        for _ in 0..50 {
            let c = Arc::new(VersionChain::new(*version(0)));
            let b = Arc::new(Barrier::new(2));
            let hs: Vec<_> = (0..2)
                .map(|_| {
                    let (c, b) = (c.clone(), b.clone());
                    std::thread::spawn(move || {
                        b.wait();
                        c.install(version(1)).is_ok()
                    })
                })
                .collect();
            let wins: usize = hs.into_iter().map(|h| h.join().unwrap() as usize).sum();
            assert_eq!(wins, 1);
            assert_eq!(c.timestamps(), vec![1, 0]);
        }
    }

    #[test]
    fn thousand_random_installs_stay_ordered() {
        use rand::{Rng, SeedableRng};
        let c = Arc::new(VersionChain::new(*version(0)));
        let hs: Vec<_> = (0..4)
            .map(|t| {
                let c = c.clone();
                std::thread::spawn(move || {
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(t);
                    for _ in 0..250 {
                        let _ = c.install(version(rng.gen_range(1..100_000)));
                    }
                })
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        let ts = c.timestamps();
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    proptest! {
        #[test]
        fn prop_lookup_matches_scan(mut stamps in proptest::collection::btree_set(1u64..500, 0..30), q in 0u64..600) {
            let c = VersionChain::new(*version(0));
            let mut all = vec![0u64];
            for ts in std::mem::take(&mut stamps) {
                c.install(version(ts)).unwrap();
                all.push(ts);
            }
            let expect = all.iter().copied().filter(|&t| t <= q).max().unwrap();
            prop_assert_eq!(c.lookup(q).commit_ts(), expect);
        }
    }
}
