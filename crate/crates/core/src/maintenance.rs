//! Background maintenance: merge execution, rebasing of lagging values, and
//! grace-period reclamation of old versions and log prefixes.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::delta::{Slot, Ule};
use crate::index::{CubitIndex, Garbage, IndexCore, MergeOutcome, MergeRequest};
use crate::stats::Counters;
use crate::traits::Value;
use crate::version::VersionedVb;

/// Lagging values rebased per pass at most.
const REBASES_PER_PASS: usize = 16;
/// Merges per pass, so that reclamation keeps up with version churn.
const MERGES_PER_PASS: usize = 16;
const IDLE_SLEEP: Duration = Duration::from_micros(200);

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MaintenanceReport {
    pub merges: u64,
    pub merge_conflicts: u64,
    pub rebases: u64,
    pub versions_freed: u64,
    pub ules_freed: u64,
}

impl MaintenanceReport {
    pub fn is_idle(&self) -> bool {
        *self == MaintenanceReport::default()
    }
}

impl IndexCore {
    /// Runs up to `budget` queued merges in FIFO order.
    pub(crate) fn drain_merge_queue(&self, budget: usize, report: &mut MaintenanceReport) {
        for _ in 0..budget {
            let Some(req) = self.merge_queue.pop() else { return };
            self.merge_pending[req.slot.index()].store(false, Ordering::Release);
            match self.merge_slot(req.slot, req.donation, false) {
                MergeOutcome::Committed { .. } => report.merges += 1,
                MergeOutcome::NothingToMerge => {}
                MergeOutcome::Conflict => {
                    report.merge_conflicts += 1;
                    if req.attempts + 1 > self.config.merge_retry_limit {
                        Counters::bump(&self.counters.merges_abandoned);
                        continue;
                    }
                    let retry = MergeRequest {
                        slot: req.slot,
                        donation: None,
                        attempts: req.attempts + 1,
                    };
                    if self.merge_queue.push(retry).is_err() {
                        Counters::bump(&self.counters.merge_requests_dropped);
                    }
                }
            }
        }
    }

    /// Values whose newest version starts too far behind the tail pin the whole
    /// log; merging them (even with nothing pending) lets HEAD advance.
    pub(crate) fn rebase_lagging(&self, report: &mut MaintenanceReport) {
        // a merge may install a newer start delta after this read
        let tail_ts = self.tail_ref().commit_ts;
        let limit = self.config.log_backlog_limit;
        let mut lagging: Vec<(u64, usize)> = self
            .chains
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let ts = c.head_ref().start_delta_ref().commit_ts;
                (tail_ts.saturating_sub(ts) > limit).then_some((ts, i))
            })
            .collect();
        lagging.sort_unstable();
        for (_, i) in lagging.into_iter().take(REBASES_PER_PASS) {
            match self.merge_slot(Slot::from_index(i), None, true) {
                MergeOutcome::Committed { .. } => {
                    report.rebases += 1;
                    Counters::bump(&self.counters.rebase_merges);
                }
                _ => report.merge_conflicts += 1,
            }
        }
    }

    /// Frees what earlier passes retired once their grace period is over, then
    /// retires versions no new snapshot can select and the log prefix no
    /// version can reach. Only one thread reclaims at a time.
    pub(crate) fn reclaim(&self, report: &mut MaintenanceReport) {
        let Some(mut st) = self.reclaim.try_lock() else { return };
        // SAFETY: only the reclaim lock holder frees versions or log entries,
        // so the traversals below cannot race with a free.
        unsafe {
            let mut kept = Vec::new();
            for (p, e) in std::mem::take(&mut st.versions) {
                if self.domain.grace_period_elapsed(e) {
                    self.free(Garbage::Version(p));
                    report.versions_freed += 1;
                    Counters::bump(&self.counters.versions_freed);
                } else {
                    kept.push((p, e));
                }
            }
            st.versions = kept;
            if let Some((from, to, e)) = st.ules {
                if self.domain.grace_period_elapsed(e) {
                    let n = self.free_ule_range(from, to);
                    report.ules_freed += n;
                    Counters::add(&self.counters.ules_freed, n);
                    st.ules = None;
                }
            }

            let unlinked = self.trim_chains();
            if !unlinked.is_empty() {
                let e = self.domain.advance();
                st.versions.extend(unlinked.into_iter().map(|p| (p, e)));
            }

            if st.ules.is_none() {
                let head = self.log.head.load(Ordering::Acquire);
                let mut oldest: *mut Ule = std::ptr::null_mut();
                let mut oldest_ts = u64::MAX;
                for c in &self.chains {
                    let mut v: Option<&VersionedVb> = Some(c.head_ref());
                    while let Some(x) = v {
                        let u = x.start_delta.load(Ordering::Acquire);
                        if (*u).commit_ts < oldest_ts {
                            oldest_ts = (*u).commit_ts;
                            oldest = u;
                        }
                        v = x.prev_ref();
                    }
                }
                if self.chains.is_empty() {
                    oldest = self.log.tail.load(Ordering::Acquire);
                    oldest_ts = (*oldest).commit_ts;
                }
                if oldest_ts > (*head).commit_ts {
                    self.log.head.store(oldest, Ordering::Release);
                    st.ules = Some((head, oldest, self.domain.advance()));
                }
            }
        }
    }

    /// Unlinks every version that no current or future snapshot can see.
    /// Snapshots announce their timestamp before reading; any that announce
    /// after the watermark is raised re-read the tail, so they start at or
    /// after `w`.
    ///
    /// # Safety
    /// Caller holds the reclaim lock.
    unsafe fn trim_chains(&self) -> Vec<*mut VersionedVb> {
        let w = self.tail_ref().commit_ts;
        self.trim_watermark.fetch_max(w, Ordering::SeqCst);
        let live = self.domain.announced();
        let mut unlinked = Vec::new();
        for c in &self.chains {
            let head = c.head_ref();
            let mut kept = head;
            let mut newer_ts = head.commit_ts;
            let mut cur = head.prev_ref();
            while let Some(v) = cur {
                let next = v.prev_ref();
                // v answers exactly the snapshots in [v.commit_ts, newer_ts)
                let seen = newer_ts > w || live.iter().any(|&(lo, hi)| lo < newer_ts && hi >= v.commit_ts);
                if seen {
                    kept = v;
                } else {
                    kept.prev.store(v.prev.load(Ordering::Acquire), Ordering::Release);
                    unlinked.push(v as *const VersionedVb as *mut VersionedVb);
                }
                newer_ts = v.commit_ts;
                cur = next;
            }
        }
        unlinked
    }

    pub(crate) fn maintenance_pass(&self) -> MaintenanceReport {
        let mut r = MaintenanceReport::default();
        self.drain_merge_queue(MERGES_PER_PASS, &mut r);
        self.rebase_lagging(&mut r);
        self.reclaim(&mut r);
        r
    }
}

impl<V: Value> CubitIndex<V> {
    /// One round of merging, rebasing and reclamation on the calling thread.
    pub fn maintenance_pass(&self) -> MaintenanceReport {
        self.core.maintenance_pass()
    }

    /// Frees retired objects whose grace period is over and retires newly
    /// unreachable ones, without running merges.
    pub fn reclaim(&self) -> MaintenanceReport {
        let mut r = MaintenanceReport::default();
        self.core.reclaim(&mut r);
        r
    }
}

/// Runs maintenance passes until `stop` is set.
pub fn run_maintenance<V: Value>(index: &CubitIndex<V>, stop: &AtomicBool) {
    while !stop.load(Ordering::Acquire) {
        if index.maintenance_pass().is_idle() {
            std::thread::sleep(IDLE_SLEEP);
        }
    }
}

/// Background maintenance threads; stopped and joined on drop.
pub struct MaintenanceHandle {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl MaintenanceHandle {
    pub fn start<V: Value>(index: Arc<CubitIndex<V>>, threads: usize) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let threads = (0..threads.max(1))
            .map(|i| {
                let (index, stop) = (index.clone(), stop.clone());
                std::thread::Builder::new()
                    .name(format!("cubit-maint-{i}"))
                    .spawn(move || run_maintenance(&index, &stop))
                    .expect("spawn maintenance thread")
            })
            .collect();
        MaintenanceHandle { stop, threads }
    }

    /// Starts `config.maintenance_threads(workers)` threads.
    pub fn for_workers<V: Value>(index: Arc<CubitIndex<V>>, workers: usize) -> Self {
        let n = index.config().maintenance_threads(workers);
        Self::start(index, n)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for MaintenanceHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
