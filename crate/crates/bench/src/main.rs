use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cubit::SyncVariant;
use cubit_bench::report::{append_csv, write_table};
use cubit_bench::{run, BenchError, Distribution, IndexKind, Mix, RunConfig, WorkloadSpec};

/// Runs one bitmap index workload and reports throughput and latency.
#[derive(Debug, Parser)]
#[command(name = "bench")]
struct Args {
    #[arg(long, default_value = "cubit", value_parser = parse::<IndexKind>)]
    index: IndexKind,
    #[arg(long, default_value = "lf", value_parser = parse::<SyncVariant>)]
    sync: SyncVariant,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 10_000_000)]
    rows: u64,
    #[arg(long, default_value_t = 100)]
    card: u32,
    /// `uniform` or `zipf:ALPHA`.
    #[arg(long, default_value = "uniform", value_parser = parse::<Distribution>)]
    dist: Distribution,
    /// Query, update, delete and insert percentages.
    #[arg(long, default_value = "90,4,3,3", value_parser = parse::<Mix>)]
    mix: Mix,
    /// Values per range query.
    #[arg(long, default_value_t = 1)]
    width: u32,
    #[arg(long, default_value_t = 100_000)]
    ops: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Append a CSV row to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Record an op trace and check the run against the shadow oracle.
    #[arg(long)]
    verify: bool,
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn main() -> ExitCode {
    let a = Args::parse();
    let spec = WorkloadSpec {
        n_rows: a.rows,
        cardinality: a.card,
        dist: a.dist,
        mix: a.mix,
        range_width: a.width,
        threads: a.threads,
        ops: a.ops,
        seed: a.seed,
    };
    let cfg = RunConfig::new(spec, a.index, a.sync).with_verify(a.verify);
    let stats = match run(&cfg) {
        Ok(s) => s,
        Err(e @ BenchError::Verification(_)) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let runs = [stats];
    write_table(&mut std::io::stdout().lock(), &runs).expect("stdout");
    if let Some(n) = runs[0].verified_queries {
        println!("verified: {n} query answers and the final state match the oracle");
    }
    if let Some(p) = a.csv {
        if let Err(e) = append_csv(&p, &runs) {
            eprintln!("error: writing {}: {e}", p.display());
            return ExitCode::FAILURE;
        }
    }
    ExitCode::SUCCESS
}
