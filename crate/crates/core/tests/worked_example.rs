//! The running example: domain {10, 20, 30}, rows numbered from 1 (row 0 is
//! padding so that the example's row numbers can be used directly).

use cubit::{CubitIndex, Hud, IndexConfig, MergeOutcome, Predicate, UleKind};

const INITIAL: [u32; 8] = [10, 10, 10, 20, 30, 20, 10, 30];

fn build(debug: bool) -> CubitIndex<u32> {
    let cfg = IndexConfig::new(3)
        .with_rows_per_segment(4)
        .with_auto_merge(false)
        .with_debug_empty_huds(debug);
    CubitIndex::build_with_domain([10, 20, 30], &INITIAL, cfg).unwrap()
}

fn run_udis(idx: &CubitIndex<u32>) {
    assert_eq!(idx.update(2, &20).unwrap().ts, 1);
    assert_eq!(idx.update(5, &30).unwrap().ts, 2);
    assert_eq!(idx.remove(7).unwrap().ts, 3);
    let (row, c) = idx.insert(&20).unwrap();
    assert_eq!((row, c.ts), (8, 4));
}

fn rows(idx: &CubitIndex<u32>, v: u32) -> Vec<u64> {
    idx.query(&Predicate::Eq(v)).unwrap().to_row_ids()
}

#[test]
fn four_udis_log_the_printed_huds() {
    let idx = build(false);
    run_udis(&idx);
    let log = idx.log_entries();
    let printed: Vec<String> = log[1..].iter().map(|e| e.huds[0].to_string()).collect();
    assert_eq!(printed, ["<2, 2, 1, 2>", "<5, 2, 2, 3>", "<7, 1, 3>", "<8, 1, 2>"]);
    assert!(log[1..].iter().all(|e| e.kind == UleKind::Udi));
    assert_eq!(idx.timestamp(), 4);
    assert_eq!(idx.n_rows(), 9);
}

#[test]
fn queries_see_the_udis() {
    let idx = build(false);
    run_udis(&idx);
    let r20 = rows(&idx, 20);
    assert!(r20.contains(&2) && r20.contains(&8));
    assert!(!rows(&idx, 10).contains(&2));
    assert_eq!(rows(&idx, 30), vec![4, 5]);
    assert_eq!(idx.lookup_value(7).unwrap(), None);
    assert_eq!(idx.lookup_value(8).unwrap(), Some(20));
}

#[test]
fn merge_of_value_30_emits_residuals() {
    for debug in [false, true] {
        let idx = build(debug);
        run_udis(&idx);
        let before = rows(&idx, 30);
        assert_eq!(idx.merge(&30).unwrap(), MergeOutcome::Committed { ts: 5 });
        let syn = idx.log_entries().pop().unwrap();
        assert_eq!(syn.kind, UleKind::Synthetic);
        assert_eq!(syn.ts, 5);
        let residual: Vec<String> = syn.huds.iter().map(Hud::to_string).collect();
        if debug {
            assert_eq!(residual, ["<5, 1, 2>", "<7, 0, ∅>"]);
            assert!(syn.elided_rows.is_empty());
        } else {
            assert_eq!(residual, ["<5, 1, 2>"]);
            assert_eq!(syn.elided_rows, vec![7]);
        }
        assert_eq!(idx.dump_log().lines().last().unwrap(), "ts=5 kind=synthetic huds=[5:2 7:]");
        // the new version of 30 has bits 5 and 7 flipped relative to the base
        assert_eq!(idx.chain_timestamps()[2], vec![5, 0]);
        assert_eq!(rows(&idx, 30), before);
        assert_eq!(rows(&idx, 20), vec![2, 3, 8]);
        assert_eq!(idx.lookup_value(5).unwrap(), Some(30));
        assert_eq!(idx.lookup_value(7).unwrap(), None);
        assert_eq!(idx.merge(&30).unwrap(), MergeOutcome::NothingToMerge);
    }
}

#[test]
fn snapshot_before_merge_is_unchanged() {
    let idx = build(false);
    idx.update(2, &20).unwrap();
    let snap = idx.snapshot();
    assert_eq!(snap.start_ts(), 1);
    idx.update(5, &30).unwrap();
    idx.remove(7).unwrap();
    idx.merge(&30).unwrap();
    assert_eq!(snap.query(&Predicate::Eq(30)).unwrap().to_row_ids(), vec![4, 7]);
    assert_eq!(snap.value_of(5).unwrap(), Some(20));
    drop(snap);
    assert_eq!(rows(&idx, 30), vec![4, 5]);
}
