//! Closed-loop discrete-event replay.
//!
//! Each stream has at most one request outstanding. The stream whose previous
//! request finished earliest goes next (ties: lowest stream id). A request is
//! handed to the FTL at its start time; its flash operations queue on the
//! chip timelines, so later requests see the load earlier ones created.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::Serialize;

use crate::device::{ChipTimeline, Ssd};
use crate::error::{Result, SimError};
use crate::ftl::{self, Ftl, FtlParams, FtlStats, ReadClass};
use crate::geometry::{FlashGeometry, Lpn};
use crate::nand::{FlashCounters, OpCostTable};
use crate::workload::{IoRequest, Op};

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest sample.
pub fn percentile(samples: &[u64], p: f64) -> Result<u64> {
    if samples.is_empty() {
        return Err(SimError::Stats("percentile of an empty sample set".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(SimError::Stats(format!("percentile {p} outside (0, 100]")));
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    Ok(v[nearest_rank(p, v.len()) - 1])
}

fn nearest_rank(p: f64, n: usize) -> usize {
    // The small bias keeps 99.9% of 1000 at rank 999 despite binary rounding.
    let r = (p * n as f64 / 100.0 - 1e-9).ceil() as usize;
    r.clamp(1, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub p999_us: f64,
    pub max_us: f64,
}

impl LatencySummary {
    pub fn from_ns(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return LatencySummary {
                count: 0,
                mean_us: 0.0,
                p50_us: 0.0,
                p99_us: 0.0,
                p999_us: 0.0,
                max_us: 0.0,
            };
        }
        let mut v = samples.to_vec();
        v.sort_unstable();
        let at = |p: f64| v[nearest_rank(p, v.len()) - 1] as f64 / 1000.0;
        let sum: u128 = v.iter().map(|&x| x as u128).sum();
        LatencySummary {
            count: v.len() as u64,
            mean_us: sum as f64 / v.len() as f64 / 1000.0,
            p50_us: at(50.0),
            p99_us: at(99.0),
            p999_us: at(99.9),
            max_us: *v.last().expect("non-empty") as f64 / 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReadTally {
    pub single: u64,
    pub double: u64,
    pub triple: u64,
    pub unmapped: u64,
    pub buffered: u64,
}

impl ReadTally {
    pub fn classified(&self) -> u64 {
        self.single + self.double + self.triple
    }

    fn frac(&self, x: u64) -> f64 {
        match self.classified() {
            0 => 0.0,
            n => x as f64 / n as f64,
        }
    }

    pub fn single_fraction(&self) -> f64 {
        self.frac(self.single)
    }

    pub fn double_fraction(&self) -> f64 {
        self.frac(self.double)
    }

    pub fn triple_fraction(&self) -> f64 {
        self.frac(self.triple)
    }
}

/// What one replay produced.
#[derive(Debug, Clone, Default)]
pub struct PhaseRecord {
    pub read_requests: u64,
    pub write_requests: u64,
    pub read_pages: u64,
    pub write_pages: u64,
    pub reads: ReadTally,
    /// Per-request latency in ns, in the order requests started.
    pub latencies_ns: Vec<u64>,
    pub flash: FlashCounters,
    pub ftl: FtlStats,
    pub gc_events: usize,
    pub end_ns: u64,
}

/// Last token written per LPN; 0 = never written.
#[derive(Debug, Clone)]
pub struct Oracle {
    shadow: Vec<u64>,
}

impl Oracle {
    pub fn new(logical_pages: u64) -> Self {
        Oracle {
            shadow: vec![0; logical_pages as usize],
        }
    }

    pub fn record(&mut self, lpn: Lpn, token: u64) {
        self.shadow[lpn as usize] = token;
    }

    pub fn expected(&self, lpn: Lpn) -> Option<u64> {
        match self.shadow[lpn as usize] {
            0 => None,
            t => Some(t),
        }
    }

    pub fn check(&self, lpn: Lpn, got: Option<u64>) -> Result<()> {
        let want = self.expected(lpn);
        if got != want {
            return Err(SimError::Oracle(format!(
                "lpn {lpn}: read token {got:?}, expected {want:?}"
            )));
        }
        Ok(())
    }

    pub fn written(&self) -> impl Iterator<Item = (Lpn, u64)> + '_ {
        self.shadow
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != 0)
            .map(|(l, &t)| (l as Lpn, t))
    }
}

pub struct Simulator {
    pub ssd: Ssd,
    pub ftl: Box<dyn Ftl>,
    pub oracle: Oracle,
    logical_pages: u64,
    open_loop: bool,
    /// Run the FTL's structural self-check every this many requests.
    pub check_every: Option<u64>,
}

impl Simulator {
    pub fn new(geom: FlashGeometry, costs: OpCostTable, params: &FtlParams) -> Result<Self> {
        geom.validate()?;
        costs.validate()?;
        let mut ssd = Ssd::new(geom, costs);
        ssd.gc_block_all = params.gc_block_all_chips;
        let logical = params.logical_pages(&geom);
        Ok(Simulator {
            ssd,
            ftl: ftl::build(params, &geom)?,
            oracle: Oracle::new(logical),
            logical_pages: logical,
            open_loop: false,
            check_every: None,
        })
    }

    pub fn set_open_loop(&mut self, on: bool) {
        self.open_loop = on;
    }

    pub fn logical_pages(&self) -> u64 {
        self.logical_pages
    }

    /// Forget queued chip work and restart the clock at zero.
    pub fn reset_clock(&mut self) {
        self.ssd.timeline = ChipTimeline::new(self.ssd.timeline.chips());
    }

    fn validate(&self, r: &IoRequest) -> Result<()> {
        if r.npages == 0 {
            return Err(SimError::Config("request with zero pages".into()));
        }
        if r.start_lpn
            .checked_add(r.npages as u64)
            .is_none_or(|e| e > self.logical_pages)
        {
            return Err(SimError::Config(format!(
                "request lpn {} + {} exceeds logical capacity {}",
                r.start_lpn, r.npages, self.logical_pages
            )));
        }
        Ok(())
    }

    /// Process one request at `start`; returns its completion time.
    pub fn submit(&mut self, r: &IoRequest, start: u64, rec: &mut PhaseRecord) -> Result<u64> {
        self.validate(r)?;
        let mut done = start;
        match r.op {
            Op::Read => {
                rec.read_requests += 1;
                rec.read_pages += r.npages as u64;
                for i in 0..r.npages as u64 {
                    let lpn = r.start_lpn + i;
                    let out = self.ftl.read(&mut self.ssd, lpn, r.npages, start)?;
                    self.oracle.check(lpn, out.token)?;
                    match (out.token, out.class) {
                        (None, _) => rec.reads.unmapped += 1,
                        (Some(_), None) => rec.reads.buffered += 1,
                        (Some(_), Some(ReadClass::Single)) => rec.reads.single += 1,
                        (Some(_), Some(ReadClass::Double)) => rec.reads.double += 1,
                        (Some(_), Some(ReadClass::Triple)) => rec.reads.triple += 1,
                    }
                    done = done.max(out.done);
                }
            }
            Op::Write => {
                rec.write_requests += 1;
                rec.write_pages += r.npages as u64;
                let tokens: Vec<u64> = (0..r.npages).map(|_| self.ssd.next_token()).collect();
                for (i, &t) in tokens.iter().enumerate() {
                    self.oracle.record(r.start_lpn + i as u64, t);
                }
                done = done.max(self.ftl.write(&mut self.ssd, r.start_lpn, &tokens, start)?);
            }
        }
        Ok(done)
    }

    /// Replay `reqs` as closed-loop streams starting at time zero of the
    /// current clock. Counters in the record cover this replay only.
    pub fn run(&mut self, reqs: &[IoRequest]) -> Result<PhaseRecord> {
        let flash0 = *self.ssd.nand.counters();
        let ftl0 = self.ftl.stats();
        let gc0 = self.ftl.gc_log().len();
        let mut rec = PhaseRecord {
            latencies_ns: Vec::with_capacity(reqs.len()),
            ..Default::default()
        };

        let streams = reqs
            .iter()
            .map(|r| r.stream as usize + 1)
            .max()
            .unwrap_or(0);
        let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); streams];
        for (i, r) in reqs.iter().enumerate() {
            queues[r.stream as usize].push_back(i);
        }
        let mut ready: BinaryHeap<Reverse<(u64, usize)>> = (0..streams)
            .filter(|&s| !queues[s].is_empty())
            .map(|s| Reverse((0, s)))
            .collect();
        let mut n = 0u64;
        let mut end = 0;
        while let Some(Reverse((t, s))) = ready.pop() {
            let idx = queues[s].pop_front().expect("ready streams have work");
            let r = &reqs[idx];
            let start = if self.open_loop {
                t.max(r.arrival_us * 1000)
            } else {
                t
            };
            let done = self.submit(r, start, &mut rec)?;
            rec.latencies_ns.push(done - start);
            end = end.max(done);
            if !queues[s].is_empty() {
                ready.push(Reverse((done, s)));
            }
            n += 1;
            if let Some(k) = self.check_every {
                if n.is_multiple_of(k) {
                    self.ftl.check_consistency(&self.ssd)?;
                }
            }
        }
        rec.flash = self.ssd.nand.counters().since(&flash0);
        rec.ftl = self.ftl.stats().since(&ftl0);
        rec.gc_events = self.ftl.gc_log().len() - gc0;
        rec.end_ns = end;
        Ok(rec)
    }

    /// Drain write buffers, then read back every written LPN through the FTL
    /// and compare with the oracle.
    pub fn verify_all(&mut self) -> Result<u64> {
        let t = self.ssd.timeline.horizon();
        self.ftl.flush(&mut self.ssd, t)?;
        self.ftl.check_consistency(&self.ssd)?;
        let written: Vec<(Lpn, u64)> = self.oracle.written().collect();
        for &(lpn, tok) in &written {
            let out = self.ftl.read(&mut self.ssd, lpn, 1, t)?;
            if out.token != Some(tok) {
                return Err(SimError::Oracle(format!(
                    "lpn {lpn}: read {:?}, expected {tok}",
                    out.token
                )));
            }
        }
        Ok(written.len() as u64)
    }
}
