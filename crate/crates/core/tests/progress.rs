#![cfg(feature = "fault-injection")]

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use cubit::{CubitIndex, FaultPoint, IndexConfig, SyncVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parks one committer right after it links its entry, then counts how many
/// UDIs eight other threads complete within `window`.
fn udis_while_parked(sync: SyncVariant, window: Duration) -> u64 {
    let vals: Vec<u32> = (0..4096).map(|i| i % 16).collect();
    let cfg = IndexConfig::new(16).with_sync(sync).with_auto_merge(false);
    let idx = CubitIndex::build_with_domain(0..16, &vals, cfg).unwrap();
    idx.faults().arm_pause(FaultPoint::AfterLink);
    let done = AtomicU64::new(0);
    let stop = AtomicBool::new(false);
    std::thread::scope(|s| {
        s.spawn(|| idx.update(0, &5).unwrap());
        while idx.faults().paused() == 0 {
            std::thread::yield_now();
        }
        for t in 0..8u64 {
            let (idx, done, stop) = (&idx, &done, &stop);
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t);
                while !stop.load(Ordering::Relaxed) {
                    let r = rng.gen_range(1..4096);
                    if idx.update(r, &rng.gen_range(0..16)).is_ok() {
                        done.fetch_add(1, Ordering::Relaxed);
                    }
                }
            });
        }
        let end = Instant::now() + window;
        while Instant::now() < end && done.load(Ordering::Relaxed) < 1000 {
            std::thread::sleep(Duration::from_millis(5));
        }
        let n = done.load(Ordering::Relaxed);
        stop.store(true, Ordering::Relaxed);
        idx.faults().release();
        n
    })
}

#[test]
fn lf_others_help_a_parked_committer() {
    let n = udis_while_parked(SyncVariant::Lf, Duration::from_secs(5));
    assert!(n >= 1000, "only {n} UDIs");
}

#[test]
fn lk_stalls_behind_a_parked_latch_holder() {
    let n = udis_while_parked(SyncVariant::Lk, Duration::from_millis(300));
    assert_eq!(n, 0);
}
