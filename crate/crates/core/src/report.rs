//! One complete run (warmup, measured phase, optional read-back) and the
//! report it produces.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

use crate::config::SimConfig;
use crate::engine::{LatencySummary, PhaseRecord, ReadTally, Simulator};
use crate::error::{Result, SimError};
use crate::ftl::{FtlKind, FtlStats, MemoryReport};
use crate::nand::FlashCounters;
use crate::workload::{generate, parse_trace, warmup_requests, IoRequest};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReadReport {
    #[serde(flatten)]
    pub tally: ReadTally,
    pub single_fraction: f64,
    pub double_fraction: f64,
    pub triple_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HostReport {
    pub requests: u64,
    pub read_requests: u64,
    pub write_requests: u64,
    pub read_pages: u64,
    pub write_pages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WarmupReport {
    pub multiplier: f64,
    pub pages_written: u64,
    pub flash: FlashCounters,
    pub gc_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ftl: String,
    pub seed: u64,
    pub config: BTreeMap<String, Value>,
    pub host: HostReport,
    pub reads: ReadReport,
    /// CMT (or model cache) hits over lookups; null when the FTL has none.
    pub cmt_hit_ratio: Option<f64>,
    /// LearnedFTL: bit-set predictions over CMT misses. LeaFTL: cached and
    /// accurate segment lookups over all lookups.
    pub model_hit_ratio: Option<f64>,
    pub flash: FlashCounters,
    pub ftl_stats: FtlStats,
    pub gc_count: u64,
    pub gc_pages_moved: u64,
    pub erase_count: u64,
    /// Flash page writes over host page writes; null without host writes.
    pub write_amplification: Option<f64>,
    pub latency: LatencySummary,
    pub energy: f64,
    pub memory: MemoryReport,
    pub warmup: WarmupReport,
    pub simulated_ns: u64,
    pub verified_pages: Option<u64>,
}

pub struct RunOutput {
    pub report: MetricsReport,
    pub latencies_ns: Vec<u64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn workload_requests(cfg: &SimConfig) -> Result<Vec<IoRequest>> {
    match &cfg.workload.trace {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| SimError::Config(format!("cannot read trace '{path}': {e}")))?;
            parse_trace(
                &text,
                cfg.workload.trace_scale,
                cfg.logical_pages(),
                cfg.workload.streams,
            )
        }
        None => generate(&cfg.gen_spec(), cfg.logical_pages()),
    }
}

/// Build a simulator and run the warmup phase, leaving a fresh clock.
pub fn warmed_simulator(cfg: &SimConfig) -> Result<(Simulator, PhaseRecord)> {
    cfg.validate()?;
    let mut sim = Simulator::new(cfg.geometry, cfg.costs, &cfg.ftl)?;
    sim.check_every = cfg.check_every;
    let warm = warmup_requests(cfg.warmup_multiplier, sim.logical_pages(), cfg.seed);
    let mut rec = sim.run(&warm)?;
    let t = sim.ssd.timeline.horizon();
    sim.ftl.flush(&mut sim.ssd, t)?;
    sim.reset_clock();
    rec.flash = *sim.ssd.nand.counters();
    rec.ftl = sim.ftl.stats();
    Ok((sim, rec))
}

pub fn execute(cfg: &SimConfig) -> Result<RunOutput> {
    let (mut sim, warm) = warmed_simulator(cfg)?;
    let reqs = workload_requests(cfg)?;
    sim.set_open_loop(cfg.workload.open_loop);
    let flash0 = *sim.ssd.nand.counters();
    let ftl0 = sim.ftl.stats();
    let mut rec = sim.run(&reqs)?;
    // buffered writes reach flash inside the measured phase
    let t = sim.ssd.timeline.horizon();
    sim.ftl.flush(&mut sim.ssd, t)?;
    rec.flash = sim.ssd.nand.counters().since(&flash0);
    rec.ftl = sim.ftl.stats().since(&ftl0);
    let verified = if cfg.verify {
        Some(sim.verify_all()?)
    } else {
        None
    };
    let report = build_report(cfg, &sim, &warm, &rec, verified);
    Ok(RunOutput {
        report,
        latencies_ns: rec.latencies_ns,
    })
}

pub fn build_report(
    cfg: &SimConfig,
    sim: &Simulator,
    warm: &PhaseRecord,
    rec: &PhaseRecord,
    verified: Option<u64>,
) -> MetricsReport {
    let s = &rec.ftl;
    let kind = sim.ftl.kind();
    let (cmt_hit_ratio, model_hit_ratio) = match kind {
        FtlKind::Ideal => (None, None),
        FtlKind::Dftl | FtlKind::Tpftl => (ratio(s.cmt_hits, s.cmt_hits + s.cmt_misses), None),
        FtlKind::Learnedftl => (
            ratio(s.cmt_hits, s.cmt_hits + s.cmt_misses),
            ratio(s.model_hits, s.cmt_misses),
        ),
        FtlKind::Leaftl => {
            let lookups = s.cache_hits + s.cache_misses;
            (ratio(s.cache_hits, lookups), ratio(s.model_hits, lookups))
        }
    };
    MetricsReport {
        ftl: kind.name().to_string(),
        seed: cfg.seed,
        config: cfg.echo(),
        host: HostReport {
            requests: rec.read_requests + rec.write_requests,
            read_requests: rec.read_requests,
            write_requests: rec.write_requests,
            read_pages: rec.read_pages,
            write_pages: rec.write_pages,
        },
        reads: ReadReport {
            tally: rec.reads,
            single_fraction: rec.reads.single_fraction(),
            double_fraction: rec.reads.double_fraction(),
            triple_fraction: rec.reads.triple_fraction(),
        },
        cmt_hit_ratio,
        model_hit_ratio,
        flash: rec.flash,
        ftl_stats: *s,
        gc_count: s.gc_count,
        gc_pages_moved: s.gc_pages_moved,
        erase_count: rec.flash.erase,
        write_amplification: ratio(rec.flash.total_writes(), rec.write_pages),
        latency: LatencySummary::from_ns(&rec.latencies_ns),
        energy: rec.flash.energy(&cfg.costs),
        memory: sim.ftl.memory(),
        warmup: WarmupReport {
            multiplier: cfg.warmup_multiplier,
            pages_written: warm.write_pages,
            flash: warm.flash,
            gc_count: warm.ftl.gc_count,
        },
        simulated_ns: rec.end_ns,
        verified_pages: verified,
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// One latency per line in microseconds, exact to the nanosecond.
pub fn latency_csv(latencies_ns: &[u64]) -> String {
    let mut out = String::with_capacity(latencies_ns.len() * 10);
    for &ns in latencies_ns {
        let _ = writeln!(out, "{}.{:03}", ns / 1000, ns % 1000);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FlashGeometry;
    use crate::workload::Pattern;

    fn small(kind: FtlKind) -> SimConfig {
        let mut c = SimConfig::with_geometry(FlashGeometry::desk());
        c.ftl.kind = kind;
        c.warmup_multiplier = 1.0;
        c.workload.requests = 500;
        c.workload.pattern = Pattern::Mixed(0.5);
        c.verify = true;
        c
    }

    #[test]
    fn latency_csv_format() {
        assert_eq!(
            latency_csv(&[40_000, 1, 123_456]),
            "40.000\n0.001\n123.456\n"
        );
    }

    #[test]
    fn report_is_self_consistent() {
        for kind in FtlKind::ALL {
            let out = execute(&small(kind)).unwrap();
            let r = &out.report;
            let sum = r.reads.single_fraction + r.reads.double_fraction + r.reads.triple_fraction;
            assert!((sum - 1.0).abs() < 1e-12, "{kind:?} {sum}");
            // the LeaFTL write buffer can absorb overwrites
            if kind != FtlKind::Leaftl {
                assert!(
                    r.write_amplification.unwrap() >= 1.0,
                    "{kind:?} {:?}",
                    r.write_amplification
                );
            }
            assert_eq!(out.latencies_ns.len() as u64, r.host.requests);
            assert_eq!(
                r.verified_pages,
                Some(r.config["derived.logical_pages"].as_u64().unwrap())
            );
            assert!(r.warmup.pages_written > 0);
        }
    }

    #[test]
    fn warmup_excluded_from_measured_counters() {
        let mut c = small(FtlKind::Dftl);
        c.workload.requests = 0;
        let r = execute(&c).unwrap().report;
        assert_eq!(r.flash, FlashCounters::default());
        assert!(r.warmup.flash.data_write >= r.warmup.pages_written);
        assert_eq!(r.write_amplification, None);
    }
}
