//! Parameter sweeps: one independent simulation per axis value.
//!
//! Cells run on a rayon pool when the `parallel` feature is on, otherwise
//! one after another. Results come back in axis order either way.

use std::fmt::Write as _;

use crate::config::{is_known_key, RawConfig};
use crate::error::{Result, SimError};
use crate::report::{execute, RunOutput};

pub struct SweepCell {
    pub value: String,
    pub outcome: std::result::Result<RunOutput, String>,
}

/// Apply `f` to every item, in order, on the calling thread.
pub fn map_sequential<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Apply `f` to every item on at most `threads` worker threads. Output order
/// matches input order.
#[cfg(feature = "parallel")]
pub fn map_parallel<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync + Send,
) -> Vec<R> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build();
    match pool {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => map_sequential(items, f),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_parallel<T: Sync, R: Send>(
    items: &[T],
    _threads: usize,
    f: impl Fn(&T) -> R + Sync + Send,
) -> Vec<R> {
    map_sequential(items, f)
}

/// Parse `key=v1,v2,...`.
pub fn parse_axis(axis: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = axis
        .split_once('=')
        .ok_or_else(|| SimError::Config(format!("axis must be key=v1,v2,..., got '{axis}'")))?;
    let key = k.trim().to_string();
    let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).collect();
    if !is_known_key(&key) {
        return Err(SimError::Config(format!("unknown sweep axis key '{key}'")));
    }
    if values.iter().any(String::is_empty) {
        return Err(SimError::Config(format!("empty value in axis '{axis}'")));
    }
    Ok((key, values))
}

pub fn run_sweep(base: &RawConfig, key: &str, values: &[String], threads: usize) -> Vec<SweepCell> {
    let cell = |v: &String| {
        let mut raw = base.clone();
        raw.set(key, v);
        let outcome = raw
            .build()
            .and_then(|cfg| execute(&cfg))
            .map_err(|e| e.to_string());
        SweepCell {
            value: v.clone(),
            outcome,
        }
    };
    map_parallel(values, threads, cell)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const SUMMARY_COLUMNS: &str = "status,ftl_kind,host_requests,single_fraction,double_fraction,triple_fraction,\
cmt_hit_ratio,model_hit_ratio,write_amplification,gc_count,erase_count,mean_us,p50_us,p99_us,p999_us,energy,error";

/// One header line plus one row per cell.
pub fn summary_csv(key: &str, cells: &[SweepCell]) -> String {
    let mut out = format!("{},{SUMMARY_COLUMNS}\n", csv_field(key));
    for c in cells {
        let _ = match &c.outcome {
            Ok(o) => {
                let r = &o.report;
                writeln!(
                    out,
                    "{},ok,{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},",
                    csv_field(&c.value),
                    r.ftl,
                    r.host.requests,
                    r.reads.single_fraction,
                    r.reads.double_fraction,
                    r.reads.triple_fraction,
                    opt(r.cmt_hit_ratio),
                    opt(r.model_hit_ratio),
                    opt(r.write_amplification),
                    r.gc_count,
                    r.erase_count,
                    r.latency.mean_us,
                    r.latency.p50_us,
                    r.latency.p99_us,
                    r.latency.p999_us,
                    r.energy,
                )
            }
            Err(e) => writeln!(
                out,
                "{},failed,,,,,,,,,,,,,,,,{}",
                csv_field(&c.value),
                csv_field(e)
            ),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let xs: Vec<u64> = (0..100).collect();
        assert_eq!(
            map_parallel(&xs, 4, |x| x * x),
            map_sequential(&xs, |x| x * x)
        );
    }

    #[test]
    fn axis_parsing() {
        let (k, v) = parse_axis("ftl=dftl, tpftl").unwrap();
        assert_eq!(k, "ftl");
        assert_eq!(v, vec!["dftl", "tpftl"]);
        assert!(parse_axis("nope=1,2").is_err());
        assert!(parse_axis("ftl").is_err());
        assert!(parse_axis("ftl=a,,b").is_err());
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    #[test]
    fn summary_has_fixed_column_count() {
        let cells = vec![SweepCell {
            value: "x".into(),
            outcome: Err("boom".into()),
        }];
        let s = summary_csv("ftl", &cells);
        let cols: Vec<usize> = s.lines().map(|l| l.split(',').count()).collect();
        assert_eq!(cols, vec![18, 18]);
    }
}
