//! The FTL contract and its implementations.

use std::any::Any;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::device::Ssd;
use crate::error::{Result, SimError};
use crate::geometry::{FlashGeometry, Lpn};
use crate::learned::{DEFAULT_EPSILON, DEFAULT_MAX_PIECES, ENTRY_SPAN};

pub mod demand;
pub mod ideal;
pub mod leaftl;
pub mod learnedftl;

pub use demand::DemandFtl;
pub use ideal::IdealFtl;
pub use leaftl::LeaFtlSim;
pub use learnedftl::LearnedFtl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FtlKind {
    Ideal,
    Dftl,
    Tpftl,
    Leaftl,
    Learnedftl,
}

impl FtlKind {
    pub const ALL: [FtlKind; 5] = [
        FtlKind::Ideal,
        FtlKind::Dftl,
        FtlKind::Tpftl,
        FtlKind::Leaftl,
        FtlKind::Learnedftl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FtlKind::Ideal => "ideal",
            FtlKind::Dftl => "dftl",
            FtlKind::Tpftl => "tpftl",
            FtlKind::Leaftl => "leaftl",
            FtlKind::Learnedftl => "learnedftl",
        }
    }

    /// CMT share of the mappings when not configured explicitly.
    pub fn default_cmt_fraction(self) -> f64 {
        match self {
            FtlKind::Learnedftl => 0.015,
            _ => 0.03,
        }
    }

    pub fn default_prefetch(self) -> bool {
        matches!(self, FtlKind::Tpftl | FtlKind::Learnedftl)
    }
}

impl fmt::Display for FtlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FtlKind {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        FtlKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                SimError::Config(format!(
                    "unknown ftl '{s}' (ideal|dftl|tpftl|leaftl|learnedftl)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ReadClass {
    Single,
    Double,
    Triple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HitSource {
    Cmt,
    Model,
    ModelCache,
    Buffer,
    None,
}

/// Result of reading one logical page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadOutcome {
    /// Token found at the page that was finally read; `None` if never written.
    pub token: Option<u64>,
    /// `None` for unmapped reads and reads served from a DRAM buffer.
    pub class: Option<ReadClass>,
    pub source: HitSource,
    pub done: u64,
}

impl ReadOutcome {
    pub fn unmapped(done: u64) -> Self {
        ReadOutcome {
            token: None,
            class: None,
            source: HitSource::None,
            done,
        }
    }
}

/// Per-FTL event tallies. Flash operation counts live in the NAND counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FtlStats {
    pub cmt_hits: u64,
    pub cmt_misses: u64,
    /// CMT misses that found their bitmap bit set.
    pub model_hits: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub mispredictions: u64,
    pub buffer_hits: u64,
    pub gc_count: u64,
    pub gc_pages_moved: u64,
    pub dirty_evictions: u64,
    pub pages_lent: u64,
    pub sequential_inits: u64,
}

impl FtlStats {
    pub fn since(&self, e: &FtlStats) -> FtlStats {
        FtlStats {
            cmt_hits: self.cmt_hits - e.cmt_hits,
            cmt_misses: self.cmt_misses - e.cmt_misses,
            model_hits: self.model_hits - e.model_hits,
            cache_hits: self.cache_hits - e.cache_hits,
            cache_misses: self.cache_misses - e.cache_misses,
            mispredictions: self.mispredictions - e.mispredictions,
            buffer_hits: self.buffer_hits - e.buffer_hits,
            gc_count: self.gc_count - e.gc_count,
            gc_pages_moved: self.gc_pages_moved - e.gc_pages_moved,
            dirty_evictions: self.dirty_evictions - e.dirty_evictions,
            pages_lent: self.pages_lent - e.pages_lent,
            sequential_inits: self.sequential_inits - e.sequential_inits,
        }
    }
}

/// One GC episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GcEvent {
    pub time_ns: u64,
    /// Group id (LearnedFTL) or flat block id (dynamic allocation).
    pub victim: u64,
    pub pages_moved: u64,
    pub translation_writes: u64,
    pub trained_entries: u64,
    pub accurate_bits: u64,
    /// Whether the GC collected all of the group's live pages or only
    /// those inside its runs.
    pub gathered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub gtd_entries: u64,
    pub cmt_capacity_entries: u64,
    pub model_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtlParams {
    pub kind: FtlKind,
    pub op_fraction: f64,
    pub cmt_fraction: Option<f64>,
    pub prefetch: Option<bool>,
    pub max_pieces: usize,
    pub epsilon: f64,
    pub lea_epsilon: f64,
    pub lea_buffer_pages: usize,
    pub lea_max_segment: usize,
    pub t_blocks_runs: u64,
    pub t_encroach_pages: Option<u64>,
    pub gc_free_watermark: u64,
    pub run_stripes: Option<u64>,
    pub group_entries: Option<u64>,
    pub cold_popcount_fraction: f64,
    pub dyn_free_blocks: Option<u64>,
    pub predict_us: f64,
    pub bitmap_us: f64,
    pub sort_us: f64,
    pub train_us: f64,
    pub gc_block_all_chips: bool,
}

impl Default for FtlParams {
    fn default() -> Self {
        FtlParams {
            kind: FtlKind::Learnedftl,
            op_fraction: 1.0 / 16.0,
            cmt_fraction: None,
            prefetch: None,
            max_pieces: DEFAULT_MAX_PIECES,
            epsilon: DEFAULT_EPSILON,
            lea_epsilon: 4.0,
            lea_buffer_pages: 2048,
            lea_max_segment: 256,
            t_blocks_runs: 4,
            t_encroach_pages: None,
            gc_free_watermark: 2,
            run_stripes: None,
            group_entries: None,
            cold_popcount_fraction: 0.25,
            dyn_free_blocks: None,
            predict_us: 0.65,
            bitmap_us: 0.0,
            sort_us: 25.0,
            train_us: 25.0,
            gc_block_all_chips: false,
        }
    }
}

impl FtlParams {
    pub fn for_kind(kind: FtlKind) -> Self {
        FtlParams {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.op_fraction > 0.0 && self.op_fraction.is_finite()) {
            return bad("gc.op_fraction must be > 0");
        }
        if let Some(f) = self.cmt_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad("mapping.cmt_fraction must be in (0, 1]");
            }
        }
        if self.max_pieces == 0 || self.max_pieces > 8 {
            return bad("model.max_pieces must be in 1..=8");
        }
        if self.epsilon.is_nan()
            || self.lea_epsilon.is_nan()
            || self.epsilon < 0.0
            || self.lea_epsilon < 0.0
        {
            return bad("model epsilon must be >= 0");
        }
        if self.lea_buffer_pages == 0 || self.lea_max_segment == 0 {
            return bad("leaftl buffer and segment length must be >= 1");
        }
        if self.t_blocks_runs == 0
            || self.t_encroach_pages == Some(0)
            || self.gc_free_watermark == 0
        {
            return bad("gc thresholds must be >= 1");
        }
        if self.run_stripes == Some(0)
            || self.group_entries == Some(0)
            || self.group_entries.is_some_and(|g| g > 64)
        {
            return bad("gc.run_stripes must be >= 1 and gc.group_entries in 1..=64");
        }
        if self.dyn_free_blocks == Some(0) {
            return bad("gc.dyn_free_blocks must be >= 1");
        }
        for v in [
            self.predict_us,
            self.bitmap_us,
            self.sort_us,
            self.train_us,
            self.cold_popcount_fraction,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("compute costs must be finite and >= 0");
            }
        }
        Ok(())
    }

    pub fn logical_pages(&self, geom: &FlashGeometry) -> u64 {
        logical_pages(geom, self.op_fraction)
    }

    pub fn effective_cmt_fraction(&self) -> f64 {
        self.cmt_fraction
            .unwrap_or(self.kind.default_cmt_fraction())
    }

    pub fn cmt_capacity(&self, geom: &FlashGeometry) -> usize {
        cmt_capacity(self.effective_cmt_fraction(), self.logical_pages(geom))
    }

    pub fn effective_prefetch(&self) -> bool {
        self.prefetch.unwrap_or(self.kind.default_prefetch())
    }
}

/// Physical pages left after setting aside `op_fraction` of the logical size.
pub fn logical_pages(geom: &FlashGeometry, op_fraction: f64) -> u64 {
    (geom.total_pages() as f64 / (1.0 + op_fraction)).floor() as u64
}

pub fn gtd_entries(geom: &FlashGeometry) -> u64 {
    geom.total_pages().div_ceil(ENTRY_SPAN as u64)
}

pub fn cmt_capacity(fraction: f64, mappings: u64) -> usize {
    (fraction * mappings as f64).floor() as usize
}

pub trait Ftl: Send {
    fn kind(&self) -> FtlKind;

    fn read(&mut self, ssd: &mut Ssd, lpn: Lpn, request_len: u32, now: u64) -> Result<ReadOutcome>;

    /// Write `tokens.len()` pages starting at `start`. Returns the completion
    /// time of the last flash operation the write waited for.
    fn write(&mut self, ssd: &mut Ssd, start: Lpn, tokens: &[u64], now: u64) -> Result<u64>;

    /// Drain any volatile write buffer to flash.
    fn flush(&mut self, _ssd: &mut Ssd, now: u64) -> Result<u64> {
        Ok(now)
    }

    fn stats(&self) -> FtlStats;

    fn gc_log(&self) -> &[GcEvent];

    fn memory(&self) -> MemoryReport;

    /// Structural self-check: GTD points at valid translation pages and the
    /// authoritative map points at valid data pages owned by the right LPN.
    fn check_consistency(&self, ssd: &Ssd) -> Result<()>;

    fn as_any(&self) -> &dyn Any;

    fn as_any_mut(&mut self) -> &mut dyn Any;
}

pub(crate) fn check_mapped_page(
    ssd: &Ssd,
    owner: crate::nand::PageOwner,
    ppn: crate::geometry::Ppn,
) -> Result<()> {
    let page = ssd.nand.peek(ppn);
    if page.state() != crate::nand::PageState::Valid || page.owner() != Some(owner) {
        return Err(SimError::Consistency(format!(
            "{owner:?} maps to ppn {} holding {:?} in state {:?}",
            ppn.0,
            page.owner(),
            page.state()
        )));
    }
    Ok(())
}

pub fn build(params: &FtlParams, geom: &FlashGeometry) -> Result<Box<dyn Ftl>> {
    params.validate()?;
    Ok(match params.kind {
        FtlKind::Ideal => Box::new(IdealFtl::new(params, geom)?),
        FtlKind::Dftl | FtlKind::Tpftl => Box::new(DemandFtl::new(params, geom)?),
        FtlKind::Leaftl => Box::new(LeaFtlSim::new(params, geom)?),
        FtlKind::Learnedftl => Box::new(LearnedFtl::new(params, geom)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trips_through_name() {
        for k in FtlKind::ALL {
            assert_eq!(k.name().parse::<FtlKind>().unwrap(), k);
        }
        assert!("ftl9".parse::<FtlKind>().is_err());
    }

    #[test]
    fn desk_sizes() {
        let g = FlashGeometry::desk();
        let p = FtlParams::for_kind(FtlKind::Learnedftl);
        assert_eq!(p.logical_pages(&g), 15420);
        assert_eq!(gtd_entries(&g), 32);
        assert_eq!(p.cmt_capacity(&g), 231);
        assert_eq!(FtlParams::for_kind(FtlKind::Dftl).cmt_capacity(&g), 462);
    }
}
