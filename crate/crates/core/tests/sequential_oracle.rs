mod common;

use common::{all_families, apply_to, pred, random_op, Shadow};
use cubit::{CubitIndex, IndexConfig, Predicate};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_history(seed: u64, card: u32, n0: usize, ops: usize, cfg: &IndexConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<u32> = (0..n0).map(|_| rng.gen_range(0..card)).collect();
    let fams = all_families(&init, card, cfg);
    let mut shadow = Shadow::new(&init);
    let mut ts = 0;
    for _ in 0..ops {
        let Some(op) = random_op(&mut rng, &shadow, card, [6, 2, 2]) else {
            continue;
        };
        shadow.apply(op);
        ts += 1;
        for f in &fams {
            assert_eq!(apply_to(f.as_ref(), op), ts, "{} seed {seed}", f.name());
        }
        let lo = rng.gen_range(0..card);
        let hi = rng.gen_range(lo..card.min(lo + 3));
        let want = shadow.rows(lo, hi);
        for f in &fams {
            let got = f.query(&pred(lo, hi)).unwrap();
            assert_eq!(got.to_row_ids(), want, "{} seed {seed} ts {ts} [{lo},{hi}]", f.name());
            assert_eq!(got.start_ts, Some(ts));
        }
    }
    for f in &fams {
        assert_eq!(f.row_count(), shadow.vals.len() as u64);
        for (r, v) in shadow.vals.iter().enumerate() {
            assert_eq!(f.value_of(r as u64).unwrap(), *v, "{} row {r}", f.name());
        }
    }
}

#[test]
fn families_agree_with_shadow() {
    for (i, card) in [4u32, 16, 100].into_iter().enumerate() {
        for seed in 0..6 {
            let cfg = IndexConfig::new(card as usize).with_rows_per_segment(64).with_merge_threshold(4);
            check_history(seed * 10 + i as u64, card, 200, 600, &cfg);
        }
    }
}

#[test]
fn families_agree_from_empty() {
    let cfg = IndexConfig::new(8).with_rows_per_segment(16);
    check_history(99, 8, 0, 400, &cfg);
}

#[test]
fn pinned_snapshots_keep_their_answers() {
    let card = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let init: Vec<u32> = (0..300).map(|_| rng.gen_range(0..card)).collect();
    let cfg = IndexConfig::new(8).with_rows_per_segment(32).with_merge_threshold(2);
    let idx = CubitIndex::build_with_domain(0..card, &init, cfg).unwrap();
    let mut shadow = Shadow::new(&init);
    let mut snaps = Vec::new();
    for step in 0..600 {
        if let Some(op) = random_op(&mut rng, &shadow, card, [6, 2, 2]) {
            shadow.apply(op);
            common::apply_to(&idx, op);
        }
        if step % 50 == 0 {
            let expect: Vec<Vec<u64>> = (0..card).map(|v| shadow.rows(v, v)).collect();
            snaps.push((idx.snapshot(), expect));
        }
        if step % 7 == 0 {
            idx.maintenance_pass();
        }
    }
    idx.merge_all();
    for (snap, expect) in &snaps {
        for v in 0..card {
            let got = snap.query(&Predicate::Eq(v)).unwrap().to_row_ids();
            assert_eq!(got, expect[v as usize], "snapshot at {} value {v}", snap.start_ts());
        }
    }
}

/// Runs the same history with merges forced every `k` UDIs and with merges
/// disabled, comparing every query.
fn merge_transparency(seed: u64, k: usize) {
    let card = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<u32> = (0..128).map(|_| rng.gen_range(0..card)).collect();
    let base = IndexConfig::new(8).with_rows_per_segment(32).with_auto_merge(false);
    let merged = CubitIndex::build_with_domain(0..card, &init, base.clone()).unwrap();
    let plain = CubitIndex::build_with_domain(0..card, &init, base.with_merge_threshold(usize::MAX >> 1)).unwrap();
    let mut shadow = Shadow::new(&init);
    let mut udis = 0;
    for _ in 0..400 {
        let Some(op) = random_op(&mut rng, &shadow, card, [6, 2, 2]) else {
            continue;
        };
        shadow.apply(op);
        apply_to(&merged, op);
        apply_to(&plain, op);
        udis += 1;
        if udis % k == 0 {
            let v = rng.gen_range(0..card);
            merged.merge(&v).unwrap();
        }
        let lo = rng.gen_range(0..card);
        let p = pred(lo, (lo + rng.gen_range(0..2)).min(card - 1));
        assert_eq!(merged.query(&p).unwrap().to_row_ids(), plain.query(&p).unwrap().to_row_ids());
    }
    assert!(merged.counters().merges_committed > 0);
    assert_eq!(plain.counters().merges_committed, 0);
}

#[test]
fn merges_are_invisible_to_queries() {
    for k in [1, 4, 16] {
        for seed in 0..3 {
            merge_transparency(seed, k);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn short_histories_match(seed in any::<u64>(), card in 2u32..12, n0 in 0usize..40) {
        let cfg = IndexConfig::new(16).with_rows_per_segment(8).with_merge_threshold(2);
        check_history(seed, card, n0, 60, &cfg);
    }
}
