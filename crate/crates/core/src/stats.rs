//! Instrumentation counters shared by the index and the baselines.

use std::sync::atomic::{AtomicU64, Ordering};

/// Largest HUD size tracked individually; bigger HUDs land in the last bucket.
pub const HUD_HIST_BUCKETS: usize = 9;

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        /// Live atomic counters.
        #[derive(Debug, Default)]
        pub struct Counters {
            $(pub $name: AtomicU64,)*
            pub hud_sizes: [AtomicU64; HUD_HIST_BUCKETS],
        }

        /// Point-in-time copy of [`Counters`].
        #[derive(Debug, Default, Clone, PartialEq, Eq)]
        pub struct CounterSnapshot {
            $(pub $name: u64,)*
            /// `hud_sizes[n]` = UDI HUDs committed with `n` positions.
            pub hud_sizes: [u64; HUD_HIST_BUCKETS],
        }

        impl Counters {
            pub fn snapshot(&self) -> CounterSnapshot {
                CounterSnapshot {
                    $($name: self.$name.load(Ordering::Relaxed),)*
                    hud_sizes: std::array::from_fn(|i| self.hud_sizes[i].load(Ordering::Relaxed)),
                }
            }
        }
    };
}

counters! {
    latch_acquisitions,
    query_latch_acquisitions,
    shared_latch_acquisitions,
    restarts,
    helps,
    tail_cas_failures,
    consolidations,
    consolidated_ops,
    ules_committed,
    udi_commits,
    queries,
    query_flips,
    merge_requests,
    merge_requests_dropped,
    merges_committed,
    merges_noop,
    merge_conflicts,
    merges_abandoned,
    versions_installed,
    versions_freed,
    ules_freed,
    max_chain_len,
    overflow_huds,
    rebase_merges,
}

impl Counters {
    #[inline]
    pub fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }

    #[inline]
    pub fn add(c: &AtomicU64, n: u64) {
        c.fetch_add(n, Ordering::Relaxed);
    }

    pub fn record_hud_size(&self, n: usize) {
        self.hud_sizes[n.min(HUD_HIST_BUCKETS - 1)].fetch_add(1, Ordering::Relaxed);
    }
}

impl CounterSnapshot {
    /// Fraction of recorded UDI HUDs with at least `n` positions.
    pub fn hud_fraction_at_least(&self, n: usize) -> f64 {
        let total: u64 = self.hud_sizes.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let big: u64 = self.hud_sizes[n.min(HUD_HIST_BUCKETS - 1)..].iter().sum();
        big as f64 / total as f64
    }
}

thread_local! {
    static IN_QUERY: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Marks the current thread as running a query until dropped.
pub(crate) struct QueryScope {
    prev: bool,
}

impl QueryScope {
    pub(crate) fn enter() -> Self {
        QueryScope {
            prev: IN_QUERY.with(|c| c.replace(true)),
        }
    }
}

impl Drop for QueryScope {
    fn drop(&mut self) {
        IN_QUERY.with(|c| c.set(self.prev));
    }
}

pub(crate) fn in_query() -> bool {
    IN_QUERY.with(|c| c.get())
}

/// Outstanding allocations of log entries and bitvector versions. Shared so a
/// test can still read it after the index is dropped; both counts return to 0
/// when nothing leaked.
#[derive(Debug, Default)]
pub struct AllocStats {
    pub ules_live: std::sync::atomic::AtomicI64,
    pub versions_live: std::sync::atomic::AtomicI64,
}

impl AllocStats {
    pub fn ules(&self) -> i64 {
        self.ules_live.load(Ordering::SeqCst)
    }

    pub fn versions(&self) -> i64 {
        self.versions_live.load(Ordering::SeqCst)
    }
}
