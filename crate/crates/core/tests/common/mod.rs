#![allow(dead_code)]

use cubit::{BitmapIndex, CubitIndex, InPlaceIndex, IndexConfig, Predicate, UcbIndex, UpBitIndex};
use rand::Rng;

/// Array-of-values model: `vals[row]` is the row's value, `None` once deleted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shadow {
    pub vals: Vec<Option<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Update(u64, u32),
    Remove(u64),
    Insert(u32),
}

impl Shadow {
    pub fn new(vals: &[u32]) -> Self {
        Shadow {
            vals: vals.iter().map(|&v| Some(v)).collect(),
        }
    }

    pub fn apply(&mut self, op: Op) {
        match op {
            Op::Update(r, v) => self.vals[r as usize] = Some(v),
            Op::Remove(r) => self.vals[r as usize] = None,
            Op::Insert(v) => self.vals.push(Some(v)),
        }
    }

    pub fn rows(&self, lo: u32, hi: u32) -> Vec<u64> {
        self.vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some_and(|v| v >= lo && v <= hi))
            .map(|(i, _)| i as u64)
            .collect()
    }
}

/// A random valid op against the current model state, or `None` when the
/// drawn op would be rejected.
pub fn random_op(rng: &mut impl Rng, shadow: &Shadow, card: u32, mix: [u32; 3]) -> Option<Op> {
    let n = shadow.vals.len() as u64;
    let pick = rng.gen_range(0..mix.iter().sum::<u32>());
    if pick < mix[0] {
        if n == 0 {
            return None;
        }
        let r = rng.gen_range(0..n);
        let v = rng.gen_range(0..card);
        match shadow.vals[r as usize] {
            Some(cur) if cur != v => Some(Op::Update(r, v)),
            _ => None,
        }
    } else if pick < mix[0] + mix[1] {
        if n == 0 {
            return None;
        }
        let r = rng.gen_range(0..n);
        shadow.vals[r as usize].map(|_| Op::Remove(r))
    } else {
        Some(Op::Insert(rng.gen_range(0..card)))
    }
}

pub fn apply_to(idx: &dyn BitmapIndex<u32>, op: Op) -> u64 {
    match op {
        Op::Update(r, v) => idx.update(r, &v).unwrap().ts,
        Op::Remove(r) => idx.remove(r).unwrap().ts,
        Op::Insert(v) => idx.insert(&v).unwrap().1.ts,
    }
}

pub fn pred(lo: u32, hi: u32) -> Predicate<u32> {
    if lo == hi {
        Predicate::Eq(lo)
    } else {
        Predicate::Range(lo, hi)
    }
}

pub fn all_families(values: &[u32], card: u32, cfg: &IndexConfig) -> Vec<Box<dyn BitmapIndex<u32>>> {
    let dom = 0..card;
    vec![
        Box::new(CubitIndex::build_with_domain(dom.clone(), values, cfg.clone()).unwrap()),
        Box::new(
            CubitIndex::build_with_domain(dom.clone(), values, cfg.clone().with_sync(cubit::SyncVariant::Lk)).unwrap(),
        ),
        Box::new(InPlaceIndex::build_with_domain(dom.clone(), values, cfg).unwrap()),
        Box::new(UcbIndex::build_with_domain(dom.clone(), values, cfg).unwrap()),
        Box::new(UpBitIndex::build_with_domain(dom, values, cfg).unwrap()),
    ]
}

/// One committed UDI or one answered query, as seen by a worker thread.
#[derive(Debug, Clone)]
pub enum Event {
    Udi { ts: u64, op: Op },
    Query { ts: u64, lo: u32, hi: u32, rows: Vec<u64> },
}

/// Runs `threads` workers issuing random ops against `idx` and returns every
/// event they observed. Updates and removes pick rows blindly; rejected ones
/// are dropped.
pub fn run_workers(idx: &dyn BitmapIndex<u32>, threads: usize, ops: usize, card: u32, seed: u64) -> Vec<Event> {
    use rand::SeedableRng;
    std::thread::scope(|s| {
        let hs: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9e37_79b9));
                    let mut ev = Vec::with_capacity(ops);
                    for _ in 0..ops {
                        let n = idx.row_count();
                        let k = rng.gen_range(0..10);
                        if k < 5 {
                            let lo = rng.gen_range(0..card);
                            let hi = rng.gen_range(lo..card.min(lo + 3));
                            let q = idx.query(&pred(lo, hi)).unwrap();
                            ev.push(Event::Query {
                                ts: q.start_ts.unwrap(),
                                lo,
                                hi,
                                rows: q.to_row_ids(),
                            });
                            continue;
                        }
                        let op = if k < 8 && n > 0 {
                            Op::Update(rng.gen_range(0..n), rng.gen_range(0..card))
                        } else if k < 9 && n > 0 {
                            Op::Remove(rng.gen_range(0..n))
                        } else {
                            Op::Insert(rng.gen_range(0..card))
                        };
                        let res = match op {
                            Op::Update(r, v) => idx.update(r, &v).map(|c| (c.ts, op)),
                            Op::Remove(r) => idx.remove(r).map(|c| (c.ts, op)),
                            Op::Insert(v) => idx.insert(&v).map(|(r, c)| (c.ts, Op::Update(r, v))),
                        };
                        if let Ok((ts, op)) = res {
                            ev.push(Event::Udi { ts, op });
                        }
                    }
                    ev
                })
            })
            .collect();
        hs.into_iter().flat_map(|h| h.join().unwrap()).collect()
    })
}

/// Replays the committed UDIs in timestamp order and checks every query
/// against the replayed state at its start timestamp. Inserts are recorded as
/// updates of the returned row. Returns (violations, distinct commit ts).
pub fn check_trace(init: &[u32], events: &[Event]) -> (usize, u64) {
    let mut udis: Vec<(u64, Op)> = Vec::new();
    let mut queries = Vec::new();
    for e in events {
        match e {
            Event::Udi { ts, op } => udis.push((*ts, *op)),
            Event::Query { ts, .. } => queries.push((*ts, e)),
        }
    }
    udis.sort_by_key(|u| u.0);
    queries.sort_by_key(|q| q.0);
    let mut shadow = Shadow::new(init);
    let mut next = 0;
    let mut bad = 0;
    for (ts, q) in queries {
        while next < udis.len() && udis[next].0 <= ts {
            match udis[next].1 {
                Op::Update(r, v) => {
                    if shadow.vals.len() <= r as usize {
                        shadow.vals.resize(r as usize + 1, None);
                    }
                    shadow.vals[r as usize] = Some(v)
                }
                op => shadow.apply(op),
            }
            next += 1;
        }
        if let Event::Query { lo, hi, rows, .. } = q {
            if *rows != shadow.rows(*lo, *hi) {
                bad += 1;
            }
        }
    }
    let mut ts: Vec<u64> = udis.iter().map(|u| u.0).collect();
    ts.dedup();
    (bad, ts.len() as u64)
}
