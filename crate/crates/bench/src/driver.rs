use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use cubit::{
    BitmapIndex, CounterSnapshot, CubitIndex, InPlaceIndex, IndexConfig, MaintenanceHandle, Predicate, SyncVariant,
    UcbIndex, UpBitIndex,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BenchError, Divergence};
use crate::oracle::{check_queries, sort_trace, Answer, QueryRecord, TraceEntry, TraceOp};
use crate::workload::{generate, OpKind, ValueSampler, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Cubit,
    UpBit,
    Ucb,
    InPlace,
}

impl FromStr for IndexKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        match s {
            "cubit" => Ok(IndexKind::Cubit),
            "upbit" => Ok(IndexKind::UpBit),
            "ucb" => Ok(IndexKind::Ucb),
            "inplace" => Ok(IndexKind::InPlace),
            _ => Err(BenchError::Config(format!("unknown index {s:?}"))),
        }
    }
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndexKind::Cubit => "cubit",
            IndexKind::UpBit => "upbit",
            IndexKind::Ucb => "ucb",
            IndexKind::InPlace => "inplace",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub spec: WorkloadSpec,
    pub kind: IndexKind,
    /// Only meaningful for CUBIT.
    pub sync: SyncVariant,
    /// Record an op trace and check it against the shadow oracle.
    pub verify: bool,
    pub merge_threshold: usize,
}

impl RunConfig {
    pub fn new(spec: WorkloadSpec, kind: IndexKind, sync: SyncVariant) -> Self {
        RunConfig {
            spec,
            kind,
            sync,
            verify: false,
            merge_threshold: IndexConfig::default().merge_threshold,
        }
    }

    pub fn with_verify(mut self, on: bool) -> Self {
        self.verify = on;
        self
    }

    pub fn variant(&self) -> String {
        match self.kind {
            IndexKind::Cubit => self.sync.to_string(),
            _ => "-".into(),
        }
    }

    fn index_config(&self) -> IndexConfig {
        IndexConfig::new(self.spec.cardinality as usize)
            .with_sync(self.sync)
            .with_merge_threshold(self.merge_threshold)
    }
}

/// Per-operation-type latency statistics over every recorded sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LatencySummary {
    pub count: usize,
    pub mean: Duration,
    pub median: Duration,
    pub p99: Duration,
    pub p99999: Duration,
}

impl LatencySummary {
    pub fn from_nanos(mut samples: Vec<u64>) -> Self {
        if samples.is_empty() {
            return LatencySummary::default();
        }
        samples.sort_unstable();
        let n = samples.len();
        // nearest-rank percentile
        let pick = |p: f64| Duration::from_nanos(samples[((p * n as f64).ceil() as usize).clamp(1, n) - 1]);
        let sum: u128 = samples.iter().map(|&x| x as u128).sum();
        LatencySummary {
            count: n,
            mean: Duration::from_nanos((sum / n as u128) as u64),
            median: pick(0.5),
            p99: pick(0.99),
            p99999: pick(0.99999),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunStats {
    pub index: String,
    pub variant: String,
    pub threads: usize,
    pub maintenance_threads: usize,
    /// Operations attempted, including rejected ones.
    pub ops: u64,
    /// Updates and deletes that hit a deleted row or a row already holding
    /// the value.
    pub rejected: u64,
    pub elapsed: Duration,
    pub throughput: f64,
    pub query: LatencySummary,
    pub update: LatencySummary,
    pub delete: LatencySummary,
    pub insert: LatencySummary,
    /// Updates, deletes and inserts together.
    pub udi: LatencySummary,
    pub counters: CounterSnapshot,
    pub final_rows: u64,
    /// Per value, the answer to an equality query after the run.
    pub final_answers: Vec<Answer>,
    /// `Some(n)` when verification ran and checked `n` query answers.
    pub verified_queries: Option<usize>,
}

/// Keeps the concrete CUBIT handle around for maintenance and diagnostics.
pub enum Built {
    Cubit(Arc<CubitIndex<u32>>),
    Other(Arc<dyn BitmapIndex<u32>>),
}

impl Built {
    pub fn as_dyn(&self) -> &dyn BitmapIndex<u32> {
        match self {
            Built::Cubit(c) => c.as_ref(),
            Built::Other(o) => o.as_ref(),
        }
    }
}

pub fn build_index(cfg: &RunConfig, initial: &[u32]) -> Result<Built, BenchError> {
    let dom = 0..cfg.spec.cardinality;
    let ic = cfg.index_config();
    Ok(match cfg.kind {
        IndexKind::Cubit => Built::Cubit(Arc::new(CubitIndex::build_with_domain(dom, initial, ic)?)),
        IndexKind::UpBit => Built::Other(Arc::new(UpBitIndex::build_with_domain(dom, initial, &ic)?)),
        IndexKind::Ucb => Built::Other(Arc::new(UcbIndex::build_with_domain(dom, initial, &ic)?)),
        IndexKind::InPlace => Built::Other(Arc::new(InPlaceIndex::build_with_domain(dom, initial, &ic)?)),
    })
}

#[derive(Default)]
struct WorkerOut {
    lat: [Vec<u64>; 4],
    rejected: u64,
    trace: Vec<TraceEntry>,
    queries: Vec<QueryRecord>,
}

fn kind_index(k: OpKind) -> usize {
    match k {
        OpKind::Query => 0,
        OpKind::Update => 1,
        OpKind::Delete => 2,
        OpKind::Insert => 3,
    }
}

fn worker(
    idx: &dyn BitmapIndex<u32>,
    spec: &WorkloadSpec,
    sampler: &ValueSampler,
    ops: u64,
    seed: u64,
    verify: bool,
) -> Result<WorkerOut, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = WorkerOut::default();
    let card = spec.cardinality;
    for _ in 0..ops {
        let kind = spec.mix.pick(&mut rng);
        let n = idx.row_count();
        let kind = if n == 0 && matches!(kind, OpKind::Update | OpKind::Delete) {
            OpKind::Insert
        } else {
            kind
        };
        let start = Instant::now();
        let res = match kind {
            OpKind::Query => {
                let lo = rng.gen_range(0..=card - spec.range_width);
                let hi = lo + spec.range_width - 1;
                let p = if lo == hi { Predicate::Eq(lo) } else { Predicate::Range(lo, hi) };
                let q = idx.query(&p)?;
                if verify {
                    out.queries.push(QueryRecord {
                        ts: q.start_ts.expect("every index reports its snapshot"),
                        lo,
                        hi,
                        answer: Answer::of_rows(q.to_row_ids()),
                    });
                }
                Ok(None)
            }
            OpKind::Update => {
                let row = rng.gen_range(0..n);
                let value = sampler.sample(&mut rng);
                idx.update(row, &value).map(|c| Some((c.ts, TraceOp::Update { row, value })))
            }
            OpKind::Delete => {
                let row = rng.gen_range(0..n);
                idx.remove(row).map(|c| Some((c.ts, TraceOp::Remove { row })))
            }
            OpKind::Insert => {
                let value = sampler.sample(&mut rng);
                idx.insert(&value).map(|(row, c)| Some((c.ts, TraceOp::Insert { row, value })))
            }
        };
        let ns = start.elapsed().as_nanos() as u64;
        match res {
            Ok(done) => {
                out.lat[kind_index(kind)].push(ns);
                if let (true, Some((ts, op))) = (verify, done) {
                    out.trace.push(TraceEntry { ts, op });
                }
            }
            Err(cubit::Error::NotFound(_) | cubit::Error::SameValue(_)) => out.rejected += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn final_answers(idx: &dyn BitmapIndex<u32>, card: u32) -> Result<Vec<Answer>, BenchError> {
    (0..card)
        .map(|v| Ok(Answer::of_rows(idx.query(&Predicate::Eq(v))?.to_row_ids())))
        .collect()
}

/// Builds the index, runs the workload on `spec.threads` workers (plus
/// maintenance threads for CUBIT), and optionally verifies the run.
pub fn run(cfg: &RunConfig) -> Result<RunStats, BenchError> {
    let initial = generate(&cfg.spec)?;
    let built = build_index(cfg, &initial)?;
    run_on(cfg, &initial, &built)
}

pub fn run_on(cfg: &RunConfig, initial: &[u32], built: &Built) -> Result<RunStats, BenchError> {
    let spec = &cfg.spec;
    spec.validate()?;
    let sampler = ValueSampler::new(spec.cardinality, spec.dist)?;
    let idx = built.as_dyn();
    let maint = match built {
        Built::Cubit(c) => Some(MaintenanceHandle::for_workers(c.clone(), spec.threads)),
        Built::Other(_) => None,
    };
    let maintenance_threads = match built {
        Built::Cubit(c) => c.config().maintenance_threads(spec.threads),
        Built::Other(_) => 0,
    };
    let threads = spec.threads;
    let barrier = Barrier::new(threads + 1);
    let (outs, elapsed) = std::thread::scope(|s| {
        let hs: Vec<_> = (0..threads)
            .map(|t| {
                let ops = spec.ops / threads as u64 + u64::from((t as u64) < spec.ops % threads as u64);
                let seed = spec.seed.wrapping_add(1 + t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let (sampler, barrier) = (&sampler, &barrier);
                s.spawn(move || {
                    barrier.wait();
                    worker(idx, spec, sampler, ops, seed, cfg.verify)
                })
            })
            .collect();
        barrier.wait();
        let start = Instant::now();
        let outs: Vec<_> = hs.into_iter().map(|h| h.join().expect("worker panicked")).collect();
        (outs, start.elapsed())
    });
    if let Some(m) = maint {
        m.stop();
    }
    let outs = outs.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut lat: [Vec<u64>; 4] = Default::default();
    let mut rejected = 0;
    let mut trace = Vec::new();
    let mut queries = Vec::new();
    for o in outs {
        for (all, l) in lat.iter_mut().zip(o.lat) {
            all.extend(l);
        }
        rejected += o.rejected;
        trace.extend(o.trace);
        queries.extend(o.queries);
    }
    let final_answers = final_answers(idx, spec.cardinality)?;
    let final_rows = idx.row_count();
    let counters = idx.counters();

    let verified_queries = if cfg.verify {
        sort_trace(&mut trace);
        queries.sort_by_key(|q| q.ts);
        let oracle = check_queries(initial, spec.cardinality, &trace, &queries)?;
        let end_ts = trace.last().map_or(0, |e| e.ts);
        if oracle.values().len() as u64 != final_rows {
            return Err(BenchError::Verification(Divergence {
                ts: end_ts,
                what: format!("index has {final_rows} rows, oracle {}", oracle.values().len()),
            }));
        }
        for v in 0..spec.cardinality {
            if oracle.answer(v, v) != final_answers[v as usize] {
                return Err(BenchError::Verification(Divergence {
                    ts: end_ts,
                    what: format!("final rows of value {v} differ"),
                }));
            }
        }
        if let Built::Cubit(c) = built {
            // one log entry per UDI batch plus one per merge
            let mut batches: Vec<u64> = trace.iter().map(|e| e.ts).collect();
            batches.dedup();
            let expect = batches.len() as u64 + counters.merges_committed;
            if c.timestamp() != expect {
                return Err(BenchError::Verification(Divergence {
                    ts: c.timestamp(),
                    what: format!(
                        "timestamp {} but {} committed UDI batches and {} merges",
                        c.timestamp(),
                        batches.len(),
                        counters.merges_committed
                    ),
                }));
            }
        }
        Some(queries.len())
    } else {
        None
    };

    let ops = lat.iter().map(Vec::len).sum::<usize>() as u64 + rejected;
    let udi = LatencySummary::from_nanos(lat[1..].concat());
    let [q, u, d, i] = lat.map(LatencySummary::from_nanos);
    Ok(RunStats {
        index: cfg.kind.to_string(),
        variant: cfg.variant(),
        threads,
        maintenance_threads,
        ops,
        rejected,
        elapsed,
        throughput: ops as f64 / elapsed.as_secs_f64(),
        query: q,
        update: u,
        delete: d,
        insert: i,
        udi,
        counters,
        final_rows,
        final_answers,
        verified_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let s = LatencySummary::from_nanos((1..=100).collect());
        assert_eq!(s.median, Duration::from_nanos(50));
        assert_eq!(s.p99, Duration::from_nanos(99));
        assert_eq!(s.p99999, Duration::from_nanos(100));
        assert_eq!(s.mean, Duration::from_nanos(50));
        assert_eq!(LatencySummary::from_nanos(vec![]).count, 0);
    }

    #[test]
    fn index_kind_round_trips() {
        for k in ["cubit", "upbit", "ucb", "inplace"] {
            assert_eq!(k.parse::<IndexKind>().unwrap().to_string(), k);
        }
        assert!("bitmap".parse::<IndexKind>().is_err());
    }
}
