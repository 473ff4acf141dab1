//! Pause hooks for adversarial scheduling tests. Compiled to nothing unless the
//! `fault-injection` feature is on.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// After a ULE is linked at the tail, before its shared-variable updates.
    AfterLink,
}

#[cfg(feature = "fault-injection")]
mod imp {
    use super::FaultPoint;
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::time::Duration;

    #[derive(Debug, Default)]
    pub struct Faults {
        armed: AtomicBool,
        paused: AtomicUsize,
        released: AtomicBool,
    }

    impl Faults {
        /// The next thread reaching `point` blocks until [`Faults::release`].
        pub fn arm_pause(&self, _point: FaultPoint) {
            self.released.store(false, Ordering::SeqCst);
            self.armed.store(true, Ordering::SeqCst);
        }

        pub fn release(&self) {
            self.released.store(true, Ordering::SeqCst);
        }

        /// Threads currently parked at a pause point.
        pub fn paused(&self) -> usize {
            self.paused.load(Ordering::SeqCst)
        }

        #[inline]
        pub(crate) fn hit(&self, _point: FaultPoint) {
            if !self.armed.load(Ordering::Relaxed) || !self.armed.swap(false, Ordering::SeqCst) {
                return;
            }
            self.paused.fetch_add(1, Ordering::SeqCst);
            while !self.released.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_micros(200));
            }
            self.paused.fetch_sub(1, Ordering::SeqCst);
        }
    }
}

#[cfg(not(feature = "fault-injection"))]
mod imp {
    use super::FaultPoint;

    #[derive(Debug, Default)]
    pub struct Faults;

    impl Faults {
        #[inline(always)]
        pub(crate) fn hit(&self, _point: FaultPoint) {}
    }
}

pub use imp::Faults;
