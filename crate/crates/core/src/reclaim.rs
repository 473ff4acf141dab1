//! Grace-period detection for deferred reclamation.
//!
//! Every thread that touches shared index state brackets the operation with a
//! [`Guard`]. While pinned, a participant publishes the global epoch it saw;
//! between operations it is quiescent. An object unlinked before the epoch was
//! advanced to `e` may be freed once every participant is either quiescent or
//! pinned at an epoch `>= e`.

use std::cell::RefCell;
use std::marker::PhantomData;
use std::sync::atomic::{fence, AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use crossbeam_utils::CachePadded;
use parking_lot::Mutex;

const QUIESCENT: u64 = u64::MAX;

static NEXT_DOMAIN_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
struct Participant {
    state: CachePadded<AtomicU64>,
    active: AtomicBool,
    /// Smallest and largest timestamp announced during the current pin;
    /// `lo > hi` when nothing is announced.
    lo: AtomicU64,
    hi: AtomicU64,
}

#[derive(Debug)]
struct Shared {
    id: u64,
    epoch: CachePadded<AtomicU64>,
    participants: Mutex<Vec<Arc<Participant>>>,
}

/// A reclamation domain. One per index.
#[derive(Debug)]
pub struct Domain {
    shared: Arc<Shared>,
}

struct LocalEntry {
    domain: Weak<Shared>,
    id: u64,
    participant: Arc<Participant>,
    depth: u32,
}

struct LocalRegistry {
    entries: Vec<LocalEntry>,
}

impl Drop for LocalRegistry {
    fn drop(&mut self) {
        for e in &self.entries {
            e.participant.state.store(QUIESCENT, Ordering::SeqCst);
            e.participant.active.store(false, Ordering::SeqCst);
        }
    }
}

thread_local! {
    static LOCAL: RefCell<LocalRegistry> = const { RefCell::new(LocalRegistry { entries: Vec::new() }) };
}

impl Default for Domain {
    fn default() -> Self {
        Self::new()
    }
}

impl Domain {
    pub fn new() -> Self {
        Domain {
            shared: Arc::new(Shared {
                id: NEXT_DOMAIN_ID.fetch_add(1, Ordering::Relaxed),
                epoch: CachePadded::new(AtomicU64::new(1)),
                participants: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn current_epoch(&self) -> u64 {
        self.shared.epoch.load(Ordering::SeqCst)
    }

    /// Advances the global epoch and returns the new value. Objects unlinked
    /// before this call may be freed once `grace_period_elapsed(returned)`.
    pub fn advance(&self) -> u64 {
        fence(Ordering::SeqCst);
        self.shared.epoch.fetch_add(1, Ordering::SeqCst) + 1
    }

    /// True once no participant can still be inside an operation that started
    /// before the epoch reached `since`.
    pub fn grace_period_elapsed(&self, since: u64) -> bool {
        fence(Ordering::SeqCst);
        let mut ps = self.shared.participants.lock();
        ps.retain(|p| p.active.load(Ordering::SeqCst));
        ps.iter().all(|p| {
            let s = p.state.load(Ordering::SeqCst);
            s == QUIESCENT || s >= since
        })
    }

    /// `[lo, hi]` timestamp ranges announced by currently pinned participants.
    pub fn announced(&self) -> Vec<(u64, u64)> {
        fence(Ordering::SeqCst);
        let ps = self.shared.participants.lock();
        ps.iter()
            .filter_map(|p| {
                let hi = p.hi.load(Ordering::SeqCst);
                let lo = p.lo.load(Ordering::SeqCst);
                (lo <= hi).then_some((lo, hi))
            })
            .collect()
    }

    /// Registered threads that are still alive.
    pub fn participant_count(&self) -> usize {
        let mut ps = self.shared.participants.lock();
        ps.retain(|p| p.active.load(Ordering::SeqCst));
        ps.len()
    }

    /// Enters an operation. Nested pins on the same thread are cheap.
    pub fn pin(&self) -> Guard<'_> {
        LOCAL.with(|l| {
            let mut l = l.borrow_mut();
            let idx = match l.entries.iter().position(|e| e.id == self.shared.id) {
                Some(i) => i,
                None => {
                    if l.entries.len() >= 8 {
                        l.entries.retain(|e| e.domain.strong_count() > 0);
                    }
                    let participant = Arc::new(Participant {
                        state: CachePadded::new(AtomicU64::new(QUIESCENT)),
                        active: AtomicBool::new(true),
                        lo: AtomicU64::new(u64::MAX),
                        hi: AtomicU64::new(0),
                    });
                    self.shared.participants.lock().push(participant.clone());
                    l.entries.push(LocalEntry {
                        domain: Arc::downgrade(&self.shared),
                        id: self.shared.id,
                        participant,
                        depth: 0,
                    });
                    l.entries.len() - 1
                }
            };
            let e = &mut l.entries[idx];
            e.depth += 1;
            if e.depth == 1 {
                let epoch = self.shared.epoch.load(Ordering::SeqCst);
                e.participant.state.store(epoch, Ordering::SeqCst);
                fence(Ordering::SeqCst);
            }
            Guard {
                domain: self,
                participant: Arc::as_ptr(&e.participant),
                _not_send: PhantomData,
            }
        })
    }

    fn unpin(&self) {
        // try_with: the registry may already be gone during thread teardown
        let _ = LOCAL.try_with(|l| {
            let mut l = l.borrow_mut();
            if let Some(e) = l.entries.iter_mut().find(|e| e.id == self.shared.id) {
                e.depth -= 1;
                if e.depth == 0 {
                    e.participant.lo.store(u64::MAX, Ordering::SeqCst);
                    e.participant.hi.store(0, Ordering::SeqCst);
                    e.participant.state.store(QUIESCENT, Ordering::SeqCst);
                }
            }
        });
    }
}

/// Proof that the current thread is inside an operation on a [`Domain`].
pub struct Guard<'d> {
    domain: &'d Domain,
    // kept alive by the thread's registry for as long as the pin lasts
    participant: *const Participant,
    _not_send: PhantomData<*mut ()>,
}

impl Guard<'_> {
    /// Publishes a timestamp this operation will read at. It stays published,
    /// widened by later announcements, until the outermost pin ends.
    pub fn announce(&self, ts: u64) {
        // SAFETY: see the field comment
        let p = unsafe { &*self.participant };
        if ts < p.lo.load(Ordering::Relaxed) {
            p.lo.store(ts, Ordering::SeqCst);
        }
        if ts > p.hi.load(Ordering::Relaxed) {
            p.hi.store(ts, Ordering::SeqCst);
        }
        fence(Ordering::SeqCst);
    }

    pub fn domain(&self) -> &Domain {
        self.domain
    }
}

impl Drop for Guard<'_> {
    fn drop(&mut self) {
        self.domain.unpin();
    }
}
