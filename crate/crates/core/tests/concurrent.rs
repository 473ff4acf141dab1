mod common;

use std::sync::Arc;

use common::{check_trace, run_workers};
use cubit::{BitmapIndex, CubitIndex, IndexConfig, MaintenanceHandle, SyncVariant, UpBitIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CARD: u32 = 12;

fn init(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..CARD)).collect()
}

fn stress(sync: SyncVariant, seed: u64) {
    let vals = init(2000, seed);
    let cfg = IndexConfig::new(16).with_rows_per_segment(128).with_merge_threshold(8).with_sync(sync);
    let idx = Arc::new(CubitIndex::build_with_domain(0..CARD, &vals, cfg).unwrap());
    let maint = MaintenanceHandle::for_workers(idx.clone(), 4);
    let events = run_workers(idx.as_ref(), 4, 3000, CARD, seed);
    maint.stop();
    let (bad, distinct) = check_trace(&vals, &events);
    assert_eq!(bad, 0, "{sync} seed {seed}");
    let c = idx.counters();
    assert_eq!(idx.timestamp(), distinct + c.merges_committed);
    assert_eq!(idx.timestamp(), c.ules_committed);
    assert_eq!(c.query_latch_acquisitions, 0);
    assert!(c.merges_committed > 0);
}

#[test]
fn lf_snapshots_are_consistent() {
    for seed in 0..3 {
        stress(SyncVariant::Lf, seed);
    }
}

#[test]
fn lk_snapshots_are_consistent() {
    for seed in 0..3 {
        stress(SyncVariant::Lk, seed);
    }
}

#[test]
fn upbit_snapshots_are_consistent() {
    let vals = init(1000, 5);
    let cfg = IndexConfig::new(16).with_rows_per_segment(128).with_merge_threshold(8);
    let idx = UpBitIndex::build_with_domain(0..CARD, &vals, &cfg).unwrap();
    let events = run_workers(&idx, 4, 2000, CARD, 5);
    assert_eq!(check_trace(&vals, &events).0, 0);
}

/// Every thread hammers the same few rows, so nearly every commit races.
fn same_row_storm(sync: SyncVariant) -> Arc<CubitIndex<u32>> {
    let vals = vec![0u32; 8];
    let cfg = IndexConfig::new(16).with_rows_per_segment(64).with_sync(sync);
    let idx = Arc::new(CubitIndex::build_with_domain(0..CARD, &vals, cfg).unwrap());
    let maint = MaintenanceHandle::start(idx.clone(), 1);
    std::thread::scope(|s| {
        for t in 0..6u64 {
            let idx = &idx;
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t);
                let mut done = 0;
                while done < 2000 {
                    let r = rng.gen_range(0..2);
                    let v = rng.gen_range(0..CARD);
                    if idx.update(r, &v).is_ok() {
                        done += 1;
                    }
                }
            });
        }
    });
    maint.stop();
    let c = idx.counters();
    assert_eq!(c.udi_commits, 12_000);
    assert_eq!(idx.timestamp(), c.ules_committed);
    for r in 0..8 {
        let v = idx.lookup_value(r).unwrap().unwrap();
        let hits = (0..CARD)
            .filter(|&x| idx.query(&cubit::Predicate::Eq(x)).unwrap().get(r))
            .count();
        assert_eq!(hits, 1);
        assert!(idx.query(&cubit::Predicate::Eq(v)).unwrap().get(r));
    }
    idx
}

#[test]
fn lf_same_row_storm() {
    same_row_storm(SyncVariant::Lf);
}

#[test]
fn lk_same_row_storm() {
    let idx = same_row_storm(SyncVariant::Lk);
    let c = idx.counters();
    // each consolidated batch is one ULE
    assert_eq!(c.ules_committed + c.consolidated_ops - c.consolidations, c.udi_commits + c.merges_committed);
}

#[test]
fn inserts_get_distinct_rows() {
    for sync in [SyncVariant::Lf, SyncVariant::Lk] {
        let idx = CubitIndex::build_with_domain(0..CARD, &[], IndexConfig::new(16).with_sync(sync)).unwrap();
        let mut rows: Vec<u64> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..4u32)
                .map(|t| {
                    let idx = &idx;
                    s.spawn(move || (0..500).map(|_| idx.insert(&t).unwrap().0).collect::<Vec<_>>())
                })
                .collect();
            hs.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
        rows.sort_unstable();
        assert_eq!(rows, (0..2000).collect::<Vec<_>>());
        assert_eq!(idx.n_rows(), 2000);
        for t in 0..4 {
            assert_eq!(idx.query(&cubit::Predicate::Eq(t)).unwrap().count_ones(), 500);
        }
        assert_eq!(idx.row_count(), 2000);
    }
}
