//! Learned-segment FTL baseline with a DRAM write buffer, sorted flushes,
//! a log-structured segment table per translation span, and a segment cache
//! sized in bytes.
//!
//! Finding the right page after a misprediction is done with the in-memory
//! authoritative map instead of scanning OOB error intervals; the read cost
//! charged is the same (one extra data read).

use std::any::Any;
use std::collections::{BTreeMap, HashMap};

use crate::alloc::{DynAlloc, GcEpisode};
use crate::device::Ssd;
use crate::error::{Result, SimError};
use crate::geometry::{ppn_to_vppn, vppn_to_ppn, FlashGeometry, Lpn, Ppn, Vppn};
use crate::learned::ENTRY_SPAN;
use crate::mapping::entry_of;
use crate::nand::{OpClass, PageOwner};

use super::{
    check_mapped_page, cmt_capacity, gtd_entries, Ftl, FtlKind, FtlParams, FtlStats, GcEvent,
    HitSource, MemoryReport, ReadClass, ReadOutcome,
};

/// Bytes charged per cached segment and per CMT entry.
const SEGMENT_BYTES: u64 = 8;

/// `vppn = round(k * (lpn - start) + intercept)` for member LPNs.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: Lpn,
    pub len: u32,
    pub k: f64,
    pub intercept: f64,
    pub approximate: bool,
    members: Vec<u16>,
}

impl Segment {
    fn end(&self) -> Lpn {
        self.start + self.len as u64
    }

    fn overlaps(&self, o: &Segment) -> bool {
        self.start < o.end() && o.start < self.end()
    }

    fn contains(&self, lpn: Lpn) -> bool {
        lpn >= self.start
            && lpn < self.end()
            && self
                .members
                .binary_search(&((lpn - self.start) as u16))
                .is_ok()
    }

    pub fn predict(&self, lpn: Lpn) -> i64 {
        (self.k * (lpn - self.start) as f64 + self.intercept).round() as i64
    }
}

/// Greedy cone fit over `(lpn, vppn)` pairs sorted by LPN, with each segment
/// spanning at most `max_len` LPNs.
pub fn fit_segments(pairs: &[(Lpn, u64)], epsilon: f64, max_len: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let (x0, y0) = (pairs[i].0, pairs[i].1 as f64);
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut j = i + 1;
        while j < pairs.len() && pairs[j].0 - x0 < max_len as u64 {
            let dx = (pairs[j].0 - x0) as f64;
            let dy = pairs[j].1 as f64 - y0;
            let nlo = lo.max((dy - epsilon) / dx);
            let nhi = hi.min((dy + epsilon) / dx);
            if nlo > nhi {
                break;
            }
            lo = nlo;
            hi = nhi;
            j += 1;
        }
        let k = if lo.is_finite() && hi.is_finite() {
            (lo + hi) / 2.0
        } else {
            1.0
        };
        let mut seg = Segment {
            start: x0,
            len: (pairs[j - 1].0 - x0 + 1) as u32,
            k,
            intercept: y0,
            approximate: false,
            members: pairs[i..j].iter().map(|p| (p.0 - x0) as u16).collect(),
        };
        seg.approximate = pairs[i..j].iter().any(|&(x, y)| seg.predict(x) != y as i64);
        out.push(seg);
        i = j;
    }
    out
}

/// Segments of one translation span, newest level first.
#[derive(Debug, Clone, Default)]
pub struct SpanTable {
    levels: Vec<Vec<Segment>>,
}

impl SpanTable {
    pub fn segment_count(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn lookup(&self, lpn: Lpn) -> Option<&Segment> {
        self.levels
            .iter()
            .flat_map(|l| l.iter())
            .find(|s| s.contains(lpn))
    }

    /// Add a segment on top. Older segments drop the LPNs it now owns;
    /// overlapping ones at each level sink one level.
    pub fn insert(&mut self, seg: Segment) {
        let owned: Vec<Lpn> = seg.members.iter().map(|&m| seg.start + m as u64).collect();
        for level in &mut self.levels {
            for s in level.iter_mut() {
                if s.start < seg.end() && seg.start < s.end() {
                    s.members
                        .retain(|&m| owned.binary_search(&(s.start + m as u64)).is_err());
                }
            }
            level.retain(|s| !s.members.is_empty());
        }
        self.levels.retain(|l| !l.is_empty());
        let mut carry = vec![seg];
        let mut depth = 0;
        while !carry.is_empty() {
            if depth == self.levels.len() {
                self.levels.push(Vec::new());
            }
            let level = &mut self.levels[depth];
            let mut sunk = Vec::new();
            for c in carry {
                let (hit, keep): (Vec<_>, Vec<_>) = std::mem::take(level)
                    .into_iter()
                    .partition(|s| s.overlaps(&c));
                *level = keep;
                sunk.extend(hit);
                level.push(c);
            }
            level.sort_by_key(|s| s.start);
            carry = sunk;
            depth += 1;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct CacheSlot {
    stamp: u64,
    dirty: bool,
}

pub struct LeaFtlSim {
    geom: FlashGeometry,
    alloc: DynAlloc,
    truth: Vec<Option<Ppn>>,
    buffer: BTreeMap<Lpn, u64>,
    buffer_pages: usize,
    spans: Vec<SpanTable>,
    gtd: Vec<Option<Ppn>>,
    cache: HashMap<u32, CacheSlot>,
    lru: BTreeMap<u64, u32>,
    cache_bytes: u64,
    budget_bytes: u64,
    clock: u64,
    epsilon: f64,
    max_len: usize,
    logical_pages: u64,
    stats: FtlStats,
    gc_log: Vec<GcEvent>,
}

impl LeaFtlSim {
    pub fn new(params: &FtlParams, geom: &FlashGeometry) -> Result<Self> {
        let logical = params.logical_pages(geom);
        let entries = gtd_entries(geom) as usize;
        Ok(LeaFtlSim {
            geom: *geom,
            alloc: DynAlloc::new(geom, params.dyn_free_blocks),
            truth: vec![None; logical as usize],
            buffer: BTreeMap::new(),
            buffer_pages: params.lea_buffer_pages,
            spans: vec![SpanTable::default(); entries],
            gtd: vec![None; entries],
            cache: HashMap::new(),
            lru: BTreeMap::new(),
            cache_bytes: 0,
            budget_bytes: SEGMENT_BYTES
                * cmt_capacity(params.effective_cmt_fraction(), logical) as u64,
            clock: 0,
            epsilon: params.lea_epsilon,
            max_len: params.lea_max_segment.min(ENTRY_SPAN),
            logical_pages: logical,
            stats: FtlStats::default(),
            gc_log: Vec::new(),
        })
    }

    pub fn span(&self, entry: u32) -> &SpanTable {
        &self.spans[entry as usize]
    }

    pub fn cache_budget_bytes(&self) -> u64 {
        self.budget_bytes
    }

    pub fn cached_bytes(&self) -> u64 {
        self.cache_bytes
    }

    fn footprint(&self, e: u32) -> u64 {
        SEGMENT_BYTES * self.spans[e as usize].segment_count().max(1) as u64
    }

    fn touch(&mut self, e: u32) {
        self.clock += 1;
        let slot = self.cache.get_mut(&e).expect("resident");
        self.lru.remove(&slot.stamp);
        slot.stamp = self.clock;
        self.lru.insert(self.clock, e);
    }

    /// Make span `e` resident, paying a translation read if it has a page on
    /// flash. Returns (was resident, time the segments are available).
    fn ensure_resident(&mut self, ssd: &mut Ssd, e: u32, now: u64) -> Result<(bool, u64)> {
        if self.cache.contains_key(&e) {
            self.touch(e);
            return Ok((true, now));
        }
        let mut t = now;
        if let Some(tp) = self.gtd[e as usize] {
            t = ssd.read(tp, OpClass::TranslationRead, now)?.1;
        }
        self.clock += 1;
        self.cache.insert(
            e,
            CacheSlot {
                stamp: self.clock,
                dirty: false,
            },
        );
        self.lru.insert(self.clock, e);
        self.cache_bytes += self.footprint(e);
        Ok((false, t))
    }

    fn write_back(&mut self, ssd: &mut Ssd, e: u32, now: u64) -> Result<u64> {
        let p = self.alloc.alloc_translation_page(ssd).ok_or_else(|| {
            SimError::CapacityExhausted("no free block for translation page".into())
        })?;
        let tok = ssd.next_token();
        let done = ssd.program(
            p,
            PageOwner::Translation(e),
            tok,
            None,
            OpClass::TranslationWrite,
            now,
        )?;
        if let Some(old) = self.gtd[e as usize].replace(p) {
            ssd.nand.invalidate_page(old)?;
        }
        Ok(done)
    }

    /// Evict least recently used spans (never `keep`) until within budget.
    fn enforce_budget(&mut self, ssd: &mut Ssd, keep: u32, now: u64) -> Result<u64> {
        let mut done = now;
        while self.cache_bytes > self.budget_bytes {
            let Some((&stamp, &victim)) = self.lru.iter().find(|&(_, &e)| e != keep) else {
                break;
            };
            self.lru.remove(&stamp);
            let slot = self.cache.remove(&victim).expect("lru tracks residents");
            self.cache_bytes -= self.footprint(victim);
            if slot.dirty {
                self.stats.dirty_evictions += 1;
                done = done.max(self.write_back(ssd, victim, now)?);
            }
        }
        Ok(done)
    }

    /// Fold freshly placed `(lpn, ppn)` pairs (sorted by LPN) into the
    /// segment tables.
    fn learn(&mut self, ssd: &mut Ssd, placed: &[(Lpn, Ppn)], now: u64) -> Result<u64> {
        let mut done = now;
        let mut i = 0;
        while i < placed.len() {
            let e = entry_of(placed[i].0);
            let mut j = i;
            let mut pairs = Vec::new();
            while j < placed.len() && entry_of(placed[j].0) == e {
                pairs.push((placed[j].0, ppn_to_vppn(placed[j].1, &self.geom)?.0));
                j += 1;
            }
            let (_, t) = self.ensure_resident(ssd, e, now)?;
            let before = self.footprint(e);
            for seg in fit_segments(&pairs, self.epsilon, self.max_len) {
                self.spans[e as usize].insert(seg);
            }
            self.cache_bytes = self.cache_bytes - before + self.footprint(e);
            self.cache.get_mut(&e).expect("resident").dirty = true;
            done = done.max(t).max(self.enforce_budget(ssd, e, t)?);
            i = j;
        }
        Ok(done)
    }

    fn gc(&mut self, ssd: &mut Ssd, now: u64) -> Result<u64> {
        let mut done = now;
        while self.alloc.needs_gc() {
            let before = ssd.nand.counters().translation_write;
            let Some(ep) = self.alloc.collect(ssd, now)? else {
                break;
            };
            done = done.max(self.apply_gc(ssd, &ep, now)?);
            self.stats.gc_count += 1;
            self.stats.gc_pages_moved += ep.moves.len() as u64;
            self.gc_log.push(GcEvent {
                time_ns: now,
                victim: ep.victim,
                pages_moved: ep.moves.len() as u64,
                translation_writes: ssd.nand.counters().translation_write - before,
                trained_entries: 0,
                accurate_bits: 0,
                gathered: true,
            });
        }
        Ok(done)
    }

    fn apply_gc(&mut self, ssd: &mut Ssd, ep: &GcEpisode, now: u64) -> Result<u64> {
        let mut moved: Vec<(Lpn, Ppn)> = Vec::new();
        for m in &ep.moves {
            match m.owner {
                PageOwner::Translation(e) => self.gtd[e as usize] = Some(m.new),
                PageOwner::Data(lpn) => {
                    self.truth[lpn as usize] = Some(m.new);
                    moved.push((lpn, m.new));
                }
            }
        }
        moved.sort_unstable();
        self.learn(ssd, &moved, now)
    }

    fn flush_buffer(&mut self, ssd: &mut Ssd, now: u64) -> Result<u64> {
        let batch = std::mem::take(&mut self.buffer);
        let mut done = now;
        let mut placed = Vec::with_capacity(batch.len());
        for (lpn, tok) in batch {
            done = done.max(self.gc(ssd, now)?);
            let p = self
                .alloc
                .alloc_data(ssd)
                .ok_or_else(|| SimError::CapacityExhausted("no free data page".into()))?;
            done = done.max(ssd.program(
                p,
                PageOwner::Data(lpn),
                tok,
                None,
                OpClass::DataWrite,
                now,
            )?);
            if let Some(old) = self.truth[lpn as usize].replace(p) {
                ssd.nand.invalidate_page(old)?;
            }
            placed.push((lpn, p));
        }
        // A GC during the flush may already have moved some of these pages.
        placed.retain(|&(l, p)| self.truth[l as usize] == Some(p));
        Ok(done.max(self.learn(ssd, &placed, now)?))
    }

    fn check_lpn(&self, lpn: Lpn) -> Result<()> {
        if lpn >= self.logical_pages {
            return Err(SimError::Address(format!(
                "lpn {lpn} beyond logical capacity"
            )));
        }
        Ok(())
    }
}

impl Ftl for LeaFtlSim {
    fn kind(&self) -> FtlKind {
        FtlKind::Leaftl
    }

    fn read(
        &mut self,
        ssd: &mut Ssd,
        lpn: Lpn,
        _request_len: u32,
        now: u64,
    ) -> Result<ReadOutcome> {
        self.check_lpn(lpn)?;
        if let Some(&tok) = self.buffer.get(&lpn) {
            self.stats.buffer_hits += 1;
            return Ok(ReadOutcome {
                token: Some(tok),
                class: None,
                source: HitSource::Buffer,
                done: now,
            });
        }
        let Some(actual) = self.truth[lpn as usize] else {
            return Ok(ReadOutcome::unmapped(now));
        };
        let e = entry_of(lpn);
        let (resident, t) = self.ensure_resident(ssd, e, now)?;
        let t = t.max(self.enforce_budget(ssd, e, t)?);
        if resident {
            self.stats.cache_hits += 1;
        } else {
            self.stats.cache_misses += 1;
        }
        let seg = self.spans[e as usize]
            .lookup(lpn)
            .ok_or_else(|| SimError::Consistency(format!("lpn {lpn} mapped but in no segment")))?;
        let total = self.geom.total_pages() as i64;
        let predicted = vppn_to_ppn(
            Vppn(seg.predict(lpn).clamp(0, total - 1) as u64),
            &self.geom,
        )?;
        if predicted == actual {
            if resident {
                self.stats.model_hits += 1;
            }
            let (r, done) = ssd.read(actual, OpClass::DataRead, t)?;
            let class = if resident {
                ReadClass::Single
            } else {
                ReadClass::Double
            };
            return Ok(ReadOutcome {
                token: Some(r.token),
                class: Some(class),
                source: HitSource::ModelCache,
                done,
            });
        }
        self.stats.mispredictions += 1;
        let (_, t2) = ssd.read_lenient(predicted, OpClass::DataRead, t)?;
        let (r, done) = ssd.read(actual, OpClass::DataRead, t2)?;
        let class = if resident {
            ReadClass::Double
        } else {
            ReadClass::Triple
        };
        Ok(ReadOutcome {
            token: Some(r.token),
            class: Some(class),
            source: HitSource::ModelCache,
            done,
        })
    }

    fn write(&mut self, ssd: &mut Ssd, start: Lpn, tokens: &[u64], now: u64) -> Result<u64> {
        let mut done = now;
        for (i, &tok) in tokens.iter().enumerate() {
            let lpn = start + i as u64;
            self.check_lpn(lpn)?;
            self.buffer.insert(lpn, tok);
            if self.buffer.len() >= self.buffer_pages {
                done = done.max(self.flush_buffer(ssd, now)?);
            }
        }
        Ok(done)
    }

    fn flush(&mut self, ssd: &mut Ssd, now: u64) -> Result<u64> {
        self.flush_buffer(ssd, now)
    }

    fn stats(&self) -> FtlStats {
        self.stats
    }

    fn gc_log(&self) -> &[GcEvent] {
        &self.gc_log
    }

    fn memory(&self) -> MemoryReport {
        MemoryReport {
            gtd_entries: self.gtd.len() as u64,
            cmt_capacity_entries: self.budget_bytes / SEGMENT_BYTES,
            model_bytes: self.budget_bytes,
        }
    }

    fn check_consistency(&self, ssd: &Ssd) -> Result<()> {
        for (e, tp) in self.gtd.iter().enumerate() {
            if let Some(tp) = tp {
                check_mapped_page(ssd, PageOwner::Translation(e as u32), *tp)?;
            }
        }
        for (lpn, p) in self.truth.iter().enumerate() {
            if let Some(p) = p {
                check_mapped_page(ssd, PageOwner::Data(lpn as u64), *p)?;
                if self.spans[entry_of(lpn as u64) as usize]
                    .lookup(lpn as u64)
                    .is_none()
                {
                    return Err(SimError::Consistency(format!("lpn {lpn} in no segment")));
                }
            }
        }
        Ok(())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nand::OpCostTable;

    #[test]
    fn exact_run_is_one_exact_segment() {
        let pairs: Vec<(Lpn, u64)> = (0..100).map(|i| (i, 1000 + i)).collect();
        let segs = fit_segments(&pairs, 4.0, 256);
        assert_eq!(segs.len(), 1);
        assert!(!segs[0].approximate);
        assert!(pairs.iter().all(|&(x, y)| segs[0].predict(x) == y as i64));
    }

    #[test]
    fn segment_length_is_capped() {
        let pairs: Vec<(Lpn, u64)> = (0..512).map(|i| (i, i)).collect();
        let segs = fit_segments(&pairs, 4.0, 256);
        assert_eq!(segs.len(), 2);
        assert!(segs.iter().all(|s| s.len <= 256));
    }

    #[test]
    fn noisy_run_is_approximate_within_epsilon() {
        let pairs: Vec<(Lpn, u64)> = (0..64)
            .map(|i| (i, 4 * i + [0, 3, 1, 2][i as usize % 4]))
            .collect();
        let segs = fit_segments(&pairs, 4.0, 256);
        for s in &segs {
            for &m in &s.members {
                let (x, y) = pairs[(s.start + m as u64) as usize];
                assert!((s.predict(x) - y as i64).abs() <= 5);
            }
        }
        assert!(segs.iter().any(|s| s.approximate));
    }

    #[test]
    fn newer_segment_shadows_and_demotes() {
        let mut t = SpanTable::default();
        t.insert(fit_segments(&[(0, 10), (1, 11), (2, 12), (3, 13)], 0.5, 256).remove(0));
        t.insert(fit_segments(&[(2, 50), (3, 51)], 0.5, 256).remove(0));
        assert_eq!(t.level_count(), 2);
        assert_eq!(t.lookup(1).unwrap().predict(1), 11);
        assert_eq!(t.lookup(3).unwrap().predict(3), 51);
        // fully shadowed segments disappear
        t.insert(fit_segments(&[(0, 70), (1, 71)], 0.5, 256).remove(0));
        assert_eq!(t.segment_count(), 2);
    }

    #[test]
    fn buffer_flushes_at_capacity() {
        let g = FlashGeometry::desk();
        let params = FtlParams {
            lea_buffer_pages: 16,
            ..FtlParams::for_kind(FtlKind::Leaftl)
        };
        let mut f = LeaFtlSim::new(&params, &g).unwrap();
        let mut s = Ssd::new(g, OpCostTable::default());
        let toks: Vec<u64> = (0..15).map(|_| s.next_token()).collect();
        f.write(&mut s, 0, &toks, 0).unwrap();
        assert_eq!(s.nand.counters().data_write, 0);
        let t = s.next_token();
        f.write(&mut s, 15, &[t], 0).unwrap();
        assert_eq!(s.nand.counters().data_write, 16);
        f.check_consistency(&s).unwrap();
    }

    #[test]
    fn cache_budget_matches_three_percent_cmt() {
        let g = FlashGeometry::desk();
        let f = LeaFtlSim::new(&FtlParams::for_kind(FtlKind::Leaftl), &g).unwrap();
        assert_eq!(f.cache_budget_bytes(), 462 * 8);
    }
}
