use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use crate::driver::RunStats;

fn us(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Human-readable table, latencies in microseconds.
pub fn write_table(out: &mut impl Write, runs: &[RunStats]) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<8} {:<4} {:>4} {:>12} {:>10} {:>10} {:>10} {:>10} {:>12} {:>9} {:>9}",
        "index", "sync", "thr", "ops/s", "med_q", "p99_q", "med_udi", "p99_udi", "p99999_udi", "restarts", "helps"
    )?;
    for r in runs {
        writeln!(
            out,
            "{:<8} {:<4} {:>4} {:>12.0} {:>10.1} {:>10.1} {:>10.1} {:>10.1} {:>12.1} {:>9} {:>9}",
            r.index,
            r.variant,
            r.threads,
            r.throughput,
            us(r.query.median),
            us(r.query.p99),
            us(r.udi.median),
            us(r.udi.p99),
            us(r.udi.p99999),
            r.counters.restarts,
            r.counters.helps
        )?;
    }
    Ok(())
}

/// Appends one CSV row per run, writing the header when the file is new.
pub fn append_csv(path: &Path, runs: &[RunStats]) -> csv::Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record([
            "index",
            "variant",
            "threads",
            "throughput",
            "median_q",
            "p99_q",
            "median_udi",
            "p99_udi",
            "p99999_udi",
            "restarts",
            "helps",
        ])?;
    }
    for r in runs {
        w.write_record([
            r.index.clone(),
            r.variant.clone(),
            r.threads.to_string(),
            format!("{:.1}", r.throughput),
            format!("{:.3}", us(r.query.median)),
            format!("{:.3}", us(r.query.p99)),
            format!("{:.3}", us(r.udi.median)),
            format!("{:.3}", us(r.udi.p99)),
            format!("{:.3}", us(r.udi.p99999)),
            r.counters.restarts.to_string(),
            r.counters.helps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
