//! Request streams: synthetic generators, trace parsing and warmup.
//!
//! Random draws use xoshiro256** seeded through SplitMix64
//! (`Xoshiro256StarStar::seed_from_u64`), so a seed names one sequence on
//! every platform.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::geometry::Lpn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoRequest {
    pub arrival_us: u64,
    pub op: Op,
    pub start_lpn: Lpn,
    pub npages: u32,
    pub stream: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    SeqRead,
    RandRead,
    SeqWrite,
    RandWrite,
    /// Uniform random LPNs; each request is a read with this probability.
    Mixed(f64),
}

impl Pattern {
    pub fn name(&self) -> &'static str {
        match self {
            Pattern::SeqRead => "seq_read",
            Pattern::RandRead => "rand_read",
            Pattern::SeqWrite => "seq_write",
            Pattern::RandWrite => "rand_write",
            Pattern::Mixed(_) => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub pattern: Pattern,
    pub io_pages: u32,
    pub streams: u32,
    pub total_requests: u64,
    pub seed: u64,
    /// LPNs `[0, working_set)` are touched.
    pub working_set: u64,
}

impl GenSpec {
    pub fn validate(&self, logical_pages: u64) -> Result<()> {
        if self.io_pages == 0 || self.streams == 0 {
            return Err(SimError::Config(
                "workload.io_pages and workload.streams must be >= 1".into(),
            ));
        }
        if let Pattern::Mixed(f) = self.pattern {
            if !(0.0..=1.0).contains(&f) {
                return Err(SimError::Config(
                    "workload.read_fraction must be in [0, 1]".into(),
                ));
            }
        }
        if self.working_set > logical_pages {
            return Err(SimError::Config(format!(
                "working set {} exceeds logical capacity {logical_pages}",
                self.working_set
            )));
        }
        if self.working_set < self.io_pages as u64 {
            return Err(SimError::Config(
                "working set smaller than one request".into(),
            ));
        }
        Ok(())
    }
}

pub fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Requests are aligned to `io_pages` and assigned to streams round-robin.
pub fn generate(spec: &GenSpec, logical_pages: u64) -> Result<Vec<IoRequest>> {
    spec.validate(logical_pages)?;
    let slots = spec.working_set / spec.io_pages as u64;
    let mut r = rng(spec.seed);
    let out = (0..spec.total_requests)
        .map(|n| {
            let (op, slot) = match spec.pattern {
                Pattern::SeqRead => (Op::Read, n % slots),
                Pattern::SeqWrite => (Op::Write, n % slots),
                Pattern::RandRead => (Op::Read, r.gen_range(0..slots)),
                Pattern::RandWrite => (Op::Write, r.gen_range(0..slots)),
                Pattern::Mixed(f) => {
                    let op = if r.gen_bool(f) { Op::Read } else { Op::Write };
                    (op, r.gen_range(0..slots))
                }
            };
            IoRequest {
                arrival_us: 0,
                op,
                start_lpn: slot * spec.io_pages as u64,
                npages: spec.io_pages,
                stream: (n % spec.streams as u64) as u32,
            }
        })
        .collect();
    Ok(out)
}

/// `lpn -> lpn * num / den mod logical_pages`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceScale {
    pub num: u64,
    pub den: u64,
}

fn parse_field(s: &str, line: usize, what: &str) -> Result<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(SimError::Parse {
            line,
            msg: format!("{what} must be a decimal unsigned integer, got '{s}'"),
        });
    }
    s.parse().map_err(|_| SimError::Parse {
        line,
        msg: format!("{what} out of range: '{s}'"),
    })
}

/// Parse `timestamp_us,op,lpn,npages` records, one per line; `#` lines are
/// comments. Records go to `streams` streams round-robin.
pub fn parse_trace(
    text: &str,
    scale: Option<TraceScale>,
    logical_pages: u64,
    streams: u32,
) -> Result<Vec<IoRequest>> {
    if streams == 0 {
        return Err(SimError::Config("trace streams must be >= 1".into()));
    }
    if let Some(s) = scale {
        if s.den == 0 {
            return Err(SimError::Config(
                "trace scale denominator must be >= 1".into(),
            ));
        }
    }
    let mut out = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(out);
    }
    for (i, raw) in body.split('\n').enumerate() {
        let line = i + 1;
        if raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 4 {
            return Err(SimError::Parse {
                line,
                msg: format!("expected 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let ts = parse_field(fields[0], line, "timestamp")?;
        let op = match fields[1] {
            "R" => Op::Read,
            "W" => Op::Write,
            other => {
                return Err(SimError::Parse {
                    line,
                    msg: format!("op must be R or W, got '{other}'"),
                })
            }
        };
        let mut lpn = parse_field(fields[2], line, "lpn")?;
        let npages = parse_field(fields[3], line, "npages")?;
        if npages == 0 || npages > u32::MAX as u64 {
            return Err(SimError::Parse {
                line,
                msg: "npages must be in 1..=2^32-1".into(),
            });
        }
        if let Some(s) = scale {
            lpn = ((lpn as u128 * s.num as u128 / s.den as u128) % logical_pages as u128) as u64;
        }
        if lpn
            .checked_add(npages)
            .is_none_or(|end| end > logical_pages)
        {
            return Err(SimError::Config(format!(
                "trace line {line}: lpn {lpn} + {npages} pages exceeds logical capacity {logical_pages}"
            )));
        }
        out.push(IoRequest {
            arrival_us: ts,
            op,
            start_lpn: lpn,
            npages: npages as u32,
            stream: (out.len() as u64 % streams as u64) as u32,
        });
    }
    Ok(out)
}

pub const WARMUP_IO_PAGES: u32 = 128;

/// `multiplier` x logical capacity of 128-page writes: one sequential pass,
/// then 128-aligned uniform random requests. A single stream.
pub fn warmup_requests(multiplier: f64, logical_pages: u64, seed: u64) -> Vec<IoRequest> {
    let budget = (multiplier * logical_pages as f64).round() as u64;
    let io = WARMUP_IO_PAGES as u64;
    let mut out = Vec::new();
    let mut written = 0;
    let mut lpn = 0;
    while written < budget && lpn < logical_pages {
        let n = io.min(logical_pages - lpn).min(budget - written);
        out.push(IoRequest {
            arrival_us: 0,
            op: Op::Write,
            start_lpn: lpn,
            npages: n as u32,
            stream: 0,
        });
        written += n;
        lpn += n;
    }
    let slots = logical_pages.div_ceil(io);
    let mut r = rng(seed ^ 0x5741_524d_5550);
    while written < budget {
        let start = r.gen_range(0..slots) * io;
        let n = io.min(logical_pages - start).min(budget - written);
        out.push(IoRequest {
            arrival_us: 0,
            op: Op::Write,
            start_lpn: start,
            npages: n as u32,
            stream: 0,
        });
        written += n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(pattern: Pattern) -> GenSpec {
        GenSpec {
            pattern,
            io_pages: 1,
            streams: 1,
            total_requests: 100,
            seed: 7,
            working_set: 1000,
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let s = spec(Pattern::Mixed(0.5));
        assert_eq!(generate(&s, 1000).unwrap(), generate(&s, 1000).unwrap());
        let other = GenSpec {
            seed: 8,
            ..s.clone()
        };
        assert_ne!(generate(&s, 1000).unwrap(), generate(&other, 1000).unwrap());
    }

    #[test]
    fn seq_write_walks_lpns() {
        let reqs = generate(&spec(Pattern::SeqWrite), 1000).unwrap();
        let lpns: Vec<_> = reqs.iter().take(5).map(|r| r.start_lpn).collect();
        assert_eq!(lpns, vec![0, 1, 2, 3, 4]);
        assert!(reqs.iter().all(|r| r.op == Op::Write));
    }

    #[test]
    fn streams_are_round_robin() {
        let s = GenSpec {
            streams: 3,
            ..spec(Pattern::SeqRead)
        };
        let reqs = generate(&s, 1000).unwrap();
        assert_eq!(
            reqs.iter().take(4).map(|r| r.stream).collect::<Vec<_>>(),
            vec![0, 1, 2, 0]
        );
    }

    #[test]
    fn working_set_beyond_capacity_rejected() {
        assert!(matches!(
            generate(&spec(Pattern::RandRead), 999),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn parse_examples() {
        let r = parse_trace("0,R,100,4\n12,W,0,1\n", None, 1000, 1).unwrap();
        assert_eq!(
            r[0],
            IoRequest {
                arrival_us: 0,
                op: Op::Read,
                start_lpn: 100,
                npages: 4,
                stream: 0
            }
        );
        assert_eq!(
            (r[1].arrival_us, r[1].op, r[1].start_lpn),
            (12, Op::Write, 0)
        );
    }

    #[test]
    fn parse_error_carries_line() {
        assert!(matches!(
            parse_trace("x,y", None, 1000, 1),
            Err(SimError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_trace("# hi\n0,R,1,1\n0,R, 1,1", None, 1000, 1),
            Err(SimError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse_trace("0,X,1,1", None, 1000, 1),
            Err(SimError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_trace("0,R,1,0", None, 1000, 1),
            Err(SimError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn comments_skipped_and_scaling_applied() {
        let r = parse_trace(
            "# header\n5,R,300,1\n",
            Some(TraceScale { num: 3, den: 1 }),
            1000,
            1,
        )
        .unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].start_lpn, 900);
        let r = parse_trace("5,R,400,1\n", Some(TraceScale { num: 3, den: 1 }), 1000, 1).unwrap();
        assert_eq!(r[0].start_lpn, 200);
    }

    #[test]
    fn out_of_range_lpn_is_config_error() {
        assert!(matches!(
            parse_trace("0,R,999,2\n", None, 1000, 1),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn warmup_sequential_pass_covers_everything() {
        let reqs = warmup_requests(1.0, 1000, 1);
        let mut seen = vec![false; 1000];
        for r in &reqs {
            for l in r.start_lpn..r.start_lpn + r.npages as u64 {
                seen[l as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(reqs.iter().map(|r| r.npages as u64).sum::<u64>(), 1000);
    }

    #[test]
    fn warmup_random_phase_is_aligned() {
        let reqs = warmup_requests(3.0, 1000, 1);
        assert_eq!(reqs.iter().map(|r| r.npages as u64).sum::<u64>(), 3000);
        assert!(reqs
            .iter()
            .all(|r| r.start_lpn % 128 == 0 && r.npages <= 128));
    }
}
