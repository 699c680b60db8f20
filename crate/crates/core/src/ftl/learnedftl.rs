//! Learned-index FTL: demand-based mapping plus a per-entry in-place-update
//! model, group-based allocation, and model training during group GC.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Range;

use crate::device::Ssd;
use crate::error::{Result, SimError};
use crate::geometry::{
    compose_ppn, ppn_to_vppn, vppn_to_ppn, FlashGeometry, Lpn, PageAddr, Ppn, Vppn,
};
use crate::learned::{LearnedModel, TrainingPair, ENTRY_SPAN, MODEL_BYTES};
use crate::mapping::{entry_of, Loaded, MappingTable, TranslationAllocator};
use crate::nand::{us_to_ns, OpClass, PageOwner, PageState};

use super::demand::check_demand_map;
use super::{
    gtd_entries, Ftl, FtlKind, FtlParams, FtlStats, GcEvent, HitSource, MemoryReport, ReadClass,
    ReadOutcome,
};

/// How runs and groups are carved out of the device.
///
/// A run is `run_stripes` consecutive stripes (one block index on every
/// chip and plane), so its pages form one contiguous VPPN range.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub run_stripes: u64,
    pub run_pages: u64,
    pub runs: usize,
    pub group_entries: u64,
    pub groups: usize,
    pub entries: usize,
    run_blocks: Vec<Vec<u64>>,
}

impl RunLayout {
    pub fn new(geom: &FlashGeometry, params: &FtlParams) -> Result<Self> {
        let stripe = geom.stripe_pages();
        let run_stripes = params
            .run_stripes
            .unwrap_or_else(|| (ENTRY_SPAN as u64).div_ceil(stripe).max(1));
        let runs = (geom.blocks_per_plane as u64 / run_stripes) as usize;
        if runs < 4 {
            return Err(SimError::Config(format!(
                "geometry yields {runs} allocation runs of {run_stripes} stripes; need at least 4"
            )));
        }
        let run_pages = run_stripes * stripe;
        let group_entries = params
            .group_entries
            .unwrap_or_else(|| (run_pages / ENTRY_SPAN as u64).clamp(1, 64));
        let entries = gtd_entries(geom) as usize;
        let groups = entries.div_ceil(group_entries as usize);
        let ppb = geom.pages_per_block as u64;
        let run_blocks = (0..runs as u64)
            .map(|r| {
                let mut blocks = Vec::new();
                for s in 0..run_stripes {
                    for channel in 0..geom.channels {
                        for way in 0..geom.ways_per_channel {
                            for plane in 0..geom.planes_per_chip {
                                let a = PageAddr {
                                    channel,
                                    way,
                                    plane,
                                    block: (r * run_stripes + s) as u32,
                                    page: 0,
                                };
                                blocks.push(compose_ppn(&a, geom).expect("in range").0 / ppb);
                            }
                        }
                    }
                }
                blocks
            })
            .collect();
        Ok(RunLayout {
            run_stripes,
            run_pages,
            runs,
            group_entries,
            groups,
            entries,
            run_blocks,
        })
    }

    pub fn group_of_entry(&self, e: u32) -> usize {
        (e as u64 / self.group_entries) as usize
    }

    pub fn entries_of_group(&self, g: usize) -> Range<u32> {
        let lo = g as u64 * self.group_entries;
        let hi = (lo + self.group_entries).min(self.entries as u64);
        lo as u32..hi as u32
    }

    pub fn run_blocks(&self, r: usize) -> &[u64] {
        &self.run_blocks[r]
    }

    pub fn run_of_vppn(&self, v: Vppn) -> usize {
        (v.0 / self.run_pages) as usize
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct RunState {
    owner: Option<usize>,
    cursor: u64,
}

#[derive(Debug, Clone, Default)]
pub struct GroupState {
    runs: Vec<usize>,
    open: Option<usize>,
    pub runs_since_gc: u64,
    pub pages_lent: u64,
    pub pages_borrowed: u64,
    pub gc_count: u64,
    /// Host writes to the group's LPNs, plus its pages moved by another
    /// group's GC, since its own last GC.
    pub touched_since_gc: u64,
    /// The last GC collected every live page of the group.
    pub last_gc_gathered: bool,
}

#[derive(Debug, Clone, Copy)]
struct AllocMode {
    host: bool,
    use_reserve: bool,
    /// Try other groups' open tails before opening a fresh run.
    tail_first: bool,
}

const HOST: AllocMode = AllocMode {
    host: true,
    use_reserve: false,
    tail_first: false,
};
const INTERNAL: AllocMode = AllocMode {
    host: false,
    use_reserve: true,
    tail_first: false,
};
/// Single translation pages should not claim a whole run.
const TRANSLATION: AllocMode = AllocMode {
    host: false,
    use_reserve: true,
    tail_first: true,
};

/// Runs, groups and models: everything allocation needs to see.
#[derive(Debug, Clone)]
pub struct GroupSpace {
    geom: FlashGeometry,
    pub layout: RunLayout,
    runs: Vec<RunState>,
    free_runs: BTreeSet<usize>,
    pub groups: Vec<GroupState>,
    pub models: Vec<LearnedModel>,
    encroach: BTreeMap<(usize, usize), u64>,
    pending_gc: VecDeque<usize>,
    t_encroach: u64,
    cold_fraction: f64,
    reserve: usize,
    /// Host writes stop while free space (free runs plus open tails) is at
    /// or below this many pages, so GC and mapping write-backs have room.
    reserve_pages: u64,
}

impl GroupSpace {
    fn new(geom: &FlashGeometry, layout: RunLayout, params: &FtlParams) -> Self {
        let t_encroach = params.t_encroach_pages.unwrap_or(layout.run_pages);
        GroupSpace {
            geom: *geom,
            runs: vec![RunState::default(); layout.runs],
            free_runs: (0..layout.runs).collect(),
            groups: vec![GroupState::default(); layout.groups],
            models: vec![LearnedModel::default(); layout.entries],
            encroach: BTreeMap::new(),
            pending_gc: VecDeque::new(),
            t_encroach,
            cold_fraction: params.cold_popcount_fraction,
            reserve: 1,
            reserve_pages: layout.run_pages,
            layout,
        }
    }

    pub fn free_runs(&self) -> usize {
        self.free_runs.len()
    }

    fn tail(&self, r: usize) -> u64 {
        self.layout.run_pages - self.runs[r].cursor
    }

    fn open_tail(&self, g: usize) -> u64 {
        self.groups[g].open.map_or(0, |r| self.tail(r))
    }

    /// Pages that can still be programmed without erasing anything.
    pub fn pool_pages(&self) -> u64 {
        let open: u64 = (0..self.groups.len()).map(|g| self.open_tail(g)).sum();
        self.free_runs.len() as u64 * self.layout.run_pages + open
    }

    fn take(&mut self, r: usize) -> Ppn {
        let v = Vppn(r as u64 * self.layout.run_pages + self.runs[r].cursor);
        self.runs[r].cursor += 1;
        vppn_to_ppn(v, &self.geom).expect("run vppn in range")
    }

    /// Fraction of the group's LPNs its models currently predict.
    pub fn popcount_fraction(&self, g: usize) -> f64 {
        let es = self.layout.entries_of_group(g);
        let n = es.len() as f64 * ENTRY_SPAN as f64;
        let bits: u64 = es
            .map(|e| self.models[e as usize].accurate_lpns() as u64)
            .sum();
        bits as f64 / n
    }

    pub fn invalid_pages(&self, g: usize, ssd: &Ssd) -> u64 {
        self.groups[g]
            .runs
            .iter()
            .flat_map(|&r| self.layout.run_blocks(r))
            .map(|&b| ssd.nand.block(b).invalid_count as u64)
            .sum()
    }

    /// Group with the most invalid pages (ties: lowest id), if any has some.
    pub fn select_victim(&self, ssd: &Ssd) -> Option<(usize, u64)> {
        (0..self.groups.len())
            .map(|g| (self.invalid_pages(g, ssd), g))
            .filter(|&(inv, _)| inv > 0)
            .max_by_key(|&(inv, g)| (inv, std::cmp::Reverse(g)))
            .map(|(inv, g)| (g, inv))
    }

    fn acquire_run(&mut self, g: usize) -> usize {
        let next = self.groups[g]
            .open
            .map(|o| o + 1)
            .filter(|r| self.free_runs.contains(r));
        let r = next.unwrap_or_else(|| *self.free_runs.first().expect("caller checked"));
        self.free_runs.remove(&r);
        self.runs[r] = RunState {
            owner: Some(g),
            cursor: 0,
        };
        self.groups[g].runs.push(r);
        self.groups[g].open = Some(r);
        r
    }

    fn lender(&self, g: usize) -> Option<usize> {
        let half = self.layout.run_pages / 2;
        let others = (0..self.groups.len()).filter(|&h| h != g && self.open_tail(h) > 0);
        let cold = others
            .clone()
            .filter(|&h| self.open_tail(h) > half && self.popcount_fraction(h) < self.cold_fraction)
            .min_by(|&a, &b| {
                self.popcount_fraction(a)
                    .total_cmp(&self.popcount_fraction(b))
                    .then(self.open_tail(b).cmp(&self.open_tail(a)))
                    .then(a.cmp(&b))
            });
        cold.or_else(|| others.max_by_key(|&h| (self.open_tail(h), std::cmp::Reverse(h))))
    }

    fn alloc(&mut self, g: usize, mode: AllocMode) -> Option<Ppn> {
        if mode.host && self.pool_pages() <= self.reserve_pages {
            return None;
        }
        if let Some(r) = self.groups[g].open.filter(|&r| self.tail(r) > 0) {
            return Some(self.take(r));
        }
        if mode.tail_first {
            if let Some(h) = self.lender(g) {
                let r = self.groups[h].open.expect("lender has an open run");
                self.groups[h].pages_lent += 1;
                self.groups[g].pages_borrowed += 1;
                return Some(self.take(r));
            }
        }
        let spare = if mode.use_reserve { 0 } else { self.reserve };
        if self.free_runs.len() > spare {
            let r = self.acquire_run(g);
            if mode.host {
                self.groups[g].runs_since_gc += 1;
            }
            return Some(self.take(r));
        }
        let h = self.lender(g)?;
        let r = self.groups[h].open.expect("lender has an open run");
        self.groups[h].pages_lent += 1;
        self.groups[g].pages_borrowed += 1;
        if mode.host {
            let c = self.encroach.entry((g, h)).or_default();
            *c += 1;
            if *c >= self.t_encroach {
                self.encroach.remove(&(g, h));
                for x in [g, h] {
                    if !self.pending_gc.contains(&x) {
                        self.pending_gc.push_back(x);
                    }
                }
            }
        }
        Some(self.take(r))
    }

    /// Run ownership agrees with the group lists and the free set.
    pub fn check_runs(&self) -> Result<()> {
        for (g, gs) in self.groups.iter().enumerate() {
            for &r in &gs.runs {
                if self.runs[r].owner != Some(g) || self.free_runs.contains(&r) {
                    return Err(SimError::Consistency(format!(
                        "run {r} listed by group {g} but owned by {:?}",
                        self.runs[r].owner
                    )));
                }
            }
        }
        for &r in &self.free_runs {
            if self.runs[r].owner.is_some() || self.runs[r].cursor != 0 {
                return Err(SimError::Consistency(format!("free run {r} is in use")));
            }
        }
        Ok(())
    }

    /// Pages lent by all groups equals pages borrowed by all groups.
    pub fn lending_balanced(&self) -> bool {
        let lent: u64 = self.groups.iter().map(|g| g.pages_lent).sum();
        let borrowed: u64 = self.groups.iter().map(|g| g.pages_borrowed).sum();
        lent == borrowed
    }
}

impl TranslationAllocator for GroupSpace {
    fn alloc_translation(&mut self, _ssd: &mut Ssd, entry: u32, _now: u64) -> Result<Ppn> {
        let g = self.layout.group_of_entry(entry);
        self.alloc(g, TRANSLATION)
            .ok_or_else(|| SimError::CapacityExhausted("no free page for translation write".into()))
    }
}

#[derive(Debug, Clone, Copy)]
struct Knobs {
    max_pieces: usize,
    epsilon: f64,
    t_blocks: u64,
    watermark: usize,
    bitmap_ns: u64,
    predict_ns: u64,
    train_ns: u64,
}

pub struct LearnedFtl {
    geom: FlashGeometry,
    map: MappingTable,
    space: GroupSpace,
    logical_pages: u64,
    knobs: Knobs,
    stats: FtlStats,
    gc_log: Vec<GcEvent>,
}

impl LearnedFtl {
    pub fn new(params: &FtlParams, geom: &FlashGeometry) -> Result<Self> {
        let layout = RunLayout::new(geom, params)?;
        let logical = params.logical_pages(geom);
        let map = MappingTable::new(
            layout.entries,
            params.cmt_capacity(geom),
            params.effective_prefetch(),
            logical,
        );
        Ok(LearnedFtl {
            geom: *geom,
            map,
            space: GroupSpace::new(geom, layout, params),
            logical_pages: logical,
            knobs: Knobs {
                max_pieces: params.max_pieces,
                epsilon: params.epsilon,
                t_blocks: params.t_blocks_runs,
                watermark: params.gc_free_watermark as usize,
                bitmap_ns: us_to_ns(params.bitmap_us),
                predict_ns: us_to_ns(params.predict_us),
                train_ns: us_to_ns(params.sort_us + params.train_us),
            },
            stats: FtlStats::default(),
            gc_log: Vec::new(),
        })
    }

    pub fn layout(&self) -> &RunLayout {
        &self.space.layout
    }

    pub fn group(&self, g: usize) -> &GroupState {
        &self.space.groups[g]
    }

    pub fn group_of_lpn(&self, lpn: Lpn) -> usize {
        self.space.layout.group_of_entry(entry_of(lpn))
    }

    /// LPNs owned by group `g`, clipped to the logical capacity.
    pub fn group_lpns(&self, g: usize) -> Range<Lpn> {
        let es = self.space.layout.entries_of_group(g);
        let lo = (es.start as u64 * ENTRY_SPAN as u64).min(self.logical_pages);
        let hi = (es.end as u64 * ENTRY_SPAN as u64).min(self.logical_pages);
        lo..hi
    }

    pub fn model(&self, entry: u32) -> &LearnedModel {
        &self.space.models[entry as usize]
    }

    pub fn mapping(&self) -> &MappingTable {
        &self.map
    }

    pub fn space(&self) -> &GroupSpace {
        &self.space
    }

    /// What the model would return for `lpn`, bypassing the CMT.
    pub fn predict_ppn(&self, lpn: Lpn) -> Result<Option<Ppn>> {
        let e = entry_of(lpn);
        self.space.models[e as usize].predict((lpn % ENTRY_SPAN as u64) as u16, &self.geom)
    }

    fn check_lpn(&self, lpn: Lpn) -> Result<()> {
        if lpn >= self.logical_pages {
            return Err(SimError::Address(format!(
                "lpn {lpn} beyond logical capacity"
            )));
        }
        Ok(())
    }

    fn maybe_gc(&mut self, ssd: &mut Ssd, g: usize, now: u64) -> Result<()> {
        while let Some(v) = self.space.pending_gc.pop_front() {
            self.gc_group(ssd, v, now)?;
        }
        if self.space.groups[g].runs_since_gc >= self.knobs.t_blocks {
            self.gc_group(ssd, g, now)?;
        }
        if self.space.free_runs() < self.knobs.watermark {
            if let Some((v, inv)) = self.space.select_victim(ssd) {
                if inv >= self.space.layout.run_pages {
                    self.gc_group(ssd, v, now)?;
                }
            }
        }
        Ok(())
    }

    fn alloc_host(&mut self, ssd: &mut Ssd, g: usize, now: u64) -> Result<Ppn> {
        for _ in 0..=self.space.groups.len() {
            if let Some(p) = self.space.alloc(g, HOST) {
                return Ok(p);
            }
            match self.space.select_victim(ssd) {
                Some((v, _)) => self.gc_group(ssd, v, now)?,
                None => break,
            }
        }
        self.space
            .alloc(g, INTERNAL)
            .ok_or_else(|| SimError::CapacityExhausted("no free page for host write".into()))
    }

    /// Own live pages of `g` that sit outside its runs.
    fn scattered_pages(&self, g: usize) -> u64 {
        let mine: BTreeSet<usize> = self.space.groups[g].runs.iter().copied().collect();
        self.group_lpns(g)
            .filter_map(|l| self.map.current(l))
            .filter(|&p| {
                let v = ppn_to_vppn(p, &self.geom).expect("mapped ppn in range");
                !mine.contains(&self.space.layout.run_of_vppn(v))
            })
            .count() as u64
    }

    /// Run group GC on `g` now: erase its runs, write its data back in LPN
    /// order, rewrite its translation pages and retrain its models. Foreign
    /// pages parked in its runs go to their owners' space.
    ///
    /// Normally every live page of the group is gathered, wherever it is.
    /// When free space cannot absorb the pages scattered into other groups'
    /// runs, only the pages inside the victim runs are moved and the models
    /// are trained on those.
    pub fn gc_group(&mut self, ssd: &mut Ssd, g: usize, now: u64) -> Result<()> {
        let before = *ssd.nand.counters();
        let entries = self.space.layout.entries_of_group(g);
        let margin = 2 * self.space.layout.group_entries + 16;
        let gather = self.space.pool_pages() + self.space.invalid_pages(g, ssd)
            >= self.scattered_pages(g) + margin + self.space.layout.run_pages / 4;
        let victim_runs = std::mem::take(&mut self.space.groups[g].runs);
        let victim_set: BTreeSet<usize> = victim_runs.iter().copied().collect();
        self.space.groups[g].open = None;

        let mut own: Vec<(Lpn, u64)> = Vec::new();
        let mut reads_done = now;
        for e in entries.clone() {
            let mut t_map = now;
            if let Some(tp) = self.map.store.translation_ppn(e) {
                t_map = ssd.read(tp, OpClass::TranslationRead, now)?.1;
                ssd.nand.invalidate_page(tp)?;
            }
            let lo = e as u64 * ENTRY_SPAN as u64;
            for lpn in lo..(lo + ENTRY_SPAN as u64).min(self.logical_pages) {
                if let Some(p) = self.map.current(lpn) {
                    if !gather
                        && !victim_set
                            .contains(&self.space.layout.run_of_vppn(ppn_to_vppn(p, &self.geom)?))
                    {
                        continue;
                    }
                    let (r, t) = ssd.read(p, OpClass::GcRead, t_map)?;
                    if r.owner != PageOwner::Data(lpn) {
                        return Err(SimError::Consistency(format!(
                            "lpn {lpn} maps to a page of {:?}",
                            r.owner
                        )));
                    }
                    ssd.nand.invalidate_page(p)?;
                    own.push((lpn, r.token));
                    reads_done = reads_done.max(t);
                }
            }
        }

        let mut foreign: Vec<(PageOwner, u64)> = Vec::new();
        for &r in &victim_runs {
            let start = r as u64 * self.space.layout.run_pages;
            for v in start..start + self.space.runs[r].cursor {
                let p = vppn_to_ppn(Vppn(v), &self.geom)?;
                if ssd.nand.peek(p).state() == PageState::Valid {
                    let (rd, t) = ssd.read(p, OpClass::GcRead, now)?;
                    ssd.nand.invalidate_page(p)?;
                    foreign.push((rd.owner, rd.token));
                    reads_done = reads_done.max(t);
                }
            }
        }

        let mut erased = reads_done;
        for &r in &victim_runs {
            for &b in self.space.layout.run_blocks(r) {
                if ssd.nand.block(b).write_pointer > 0 {
                    erased = erased.max(ssd.erase(b, reads_done)?);
                }
            }
            self.space.runs[r] = RunState::default();
            self.space.free_runs.insert(r);
        }

        let live_entries = entries
            .clone()
            .filter(|&e| own.iter().any(|&(l, _)| entry_of(l) == e))
            .count() as u64;
        let t_w = erased + live_entries * self.knobs.train_ns;
        let mut done = t_w;

        let mut placed: Vec<(Lpn, Vppn)> = Vec::with_capacity(own.len());
        for &(lpn, tok) in &own {
            let p = self
                .space
                .alloc(g, INTERNAL)
                .ok_or_else(|| SimError::CapacityExhausted("group GC ran out of space".into()))?;
            done =
                done.max(ssd.program(p, PageOwner::Data(lpn), tok, None, OpClass::GcWrite, t_w)?);
            self.map.store.set_slot(lpn, p);
            self.map.cmt.repoint(lpn, p, false);
            placed.push((lpn, ppn_to_vppn(p, &self.geom)?));
        }

        for e in entries.clone() {
            let has_data = placed.iter().any(|&(l, _)| entry_of(l) == e);
            if !has_data && self.map.store.translation_ppn(e).is_none() {
                continue;
            }
            for (lpn, p) in self.map.cmt.take_dirty_of_entry(e) {
                self.map.store.set_slot(lpn, p);
            }
            let p = self.space.alloc_translation(ssd, e, t_w)?;
            let tok = ssd.next_token();
            done = done.max(ssd.program(
                p,
                PageOwner::Translation(e),
                tok,
                None,
                OpClass::TranslationWrite,
                t_w,
            )?);
            self.map.store.set_translation_ppn(e, p);
        }

        let mut foreign_maps: BTreeMap<u32, Vec<(Lpn, Ppn)>> = BTreeMap::new();
        for &(owner, tok) in &foreign {
            let h = match owner {
                PageOwner::Data(lpn) => self.space.layout.group_of_entry(entry_of(lpn)),
                PageOwner::Translation(e) => self.space.layout.group_of_entry(e),
            };
            let p = self
                .space
                .alloc(h, INTERNAL)
                .ok_or_else(|| SimError::CapacityExhausted("group GC ran out of space".into()))?;
            done = done.max(ssd.program(p, owner, tok, None, OpClass::GcWrite, t_w)?);
            match owner {
                PageOwner::Data(lpn) => {
                    self.space.models[entry_of(lpn) as usize]
                        .clear_bit((lpn % ENTRY_SPAN as u64) as u16);
                    self.space.groups[h].touched_since_gc += 1;
                    self.map.cmt.repoint(lpn, p, false);
                    foreign_maps
                        .entry(entry_of(lpn))
                        .or_default()
                        .push((lpn, p));
                }
                PageOwner::Translation(e) => self.map.store.set_translation_ppn(e, p),
            }
        }
        // one translation update per foreign entry, after its page moved
        for (e, moved) in &foreign_maps {
            done = done.max(self.map.write_back(*e, moved, ssd, &mut self.space, t_w)?);
        }

        let mut trained = 0;
        let mut accurate = 0;
        for e in entries {
            let lo = e as u64 * ENTRY_SPAN as u64;
            let mine: Vec<&(Lpn, Vppn)> =
                placed.iter().filter(|&&(l, _)| entry_of(l) == e).collect();
            let model = match mine.first() {
                Some(&&(_, base)) => {
                    let pairs: Vec<TrainingPair> = mine
                        .iter()
                        .map(|&&(l, v)| TrainingPair {
                            lpn_off: (l - lo) as u16,
                            vppn_off: v.0 as i64 - base.0 as i64,
                        })
                        .collect();
                    trained += 1;
                    LearnedModel::trained(base, &pairs, self.knobs.max_pieces, self.knobs.epsilon)
                }
                None => LearnedModel::default(),
            };
            accurate += model.accurate_lpns() as u64;
            self.space.models[e as usize] = model;
        }

        let gs = &mut self.space.groups[g];
        gs.runs_since_gc = 0;
        gs.gc_count += 1;
        gs.touched_since_gc = 0;
        gs.last_gc_gathered = gather;
        self.space.encroach.retain(|&(a, b), _| a != g && b != g);
        if ssd.gc_block_all {
            ssd.timeline.block_all_until(done);
        }
        let moved = (own.len() + foreign.len()) as u64;
        self.stats.gc_count += 1;
        self.stats.gc_pages_moved += moved;
        self.gc_log.push(GcEvent {
            time_ns: now,
            victim: g as u64,
            pages_moved: moved,
            translation_writes: ssd.nand.counters().translation_write - before.translation_write,
            trained_entries: trained,
            accurate_bits: accurate,
            gathered: gather,
        });
        Ok(())
    }

    /// Every set bit must predict the page the authoritative map points to.
    pub fn check_models(&self) -> Result<()> {
        for e in 0..self.space.models.len() as u32 {
            let m = &self.space.models[e as usize];
            for off in m.bitmap.ones() {
                let lpn = e as u64 * ENTRY_SPAN as u64 + off as u64;
                let pred = m.predict(off as u16, &self.geom)?;
                if pred != self.map.current(lpn) {
                    return Err(SimError::Consistency(format!(
                        "entry {e} bit {off}: model says {pred:?}, map says {:?}",
                        self.map.current(lpn)
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Ftl for LearnedFtl {
    fn kind(&self) -> FtlKind {
        FtlKind::Learnedftl
    }

    fn read(&mut self, ssd: &mut Ssd, lpn: Lpn, request_len: u32, now: u64) -> Result<ReadOutcome> {
        self.check_lpn(lpn)?;
        if let Some(p) = self.map.cmt.lookup(lpn) {
            let (r, done) = ssd.read(p, OpClass::DataRead, now)?;
            return Ok(ReadOutcome {
                token: Some(r.token),
                class: Some(ReadClass::Single),
                source: HitSource::Cmt,
                done,
            });
        }
        let t = now + self.knobs.bitmap_ns;
        if let Some(p) = self.predict_ppn(lpn)? {
            self.stats.model_hits += 1;
            let (r, done) = ssd.read(p, OpClass::DataRead, t + self.knobs.predict_ns)?;
            if r.owner != PageOwner::Data(lpn) {
                return Err(SimError::Consistency(format!(
                    "model sent lpn {lpn} to a page of {:?}",
                    r.owner
                )));
            }
            return Ok(ReadOutcome {
                token: Some(r.token),
                class: Some(ReadClass::Single),
                source: HitSource::Model,
                done,
            });
        }
        match self
            .map
            .load_mapping(lpn, request_len, ssd, &mut self.space, t)?
        {
            (Loaded::Unmapped, t) => Ok(ReadOutcome::unmapped(t)),
            (Loaded::Mapped(p), t) => {
                let (r, done) = ssd.read(p, OpClass::DataRead, t)?;
                Ok(ReadOutcome {
                    token: Some(r.token),
                    class: Some(ReadClass::Double),
                    source: HitSource::None,
                    done,
                })
            }
        }
    }

    fn write(&mut self, ssd: &mut Ssd, start: Lpn, tokens: &[u64], now: u64) -> Result<u64> {
        let mut done = now;
        let mut placed: Vec<(Lpn, Ppn)> = Vec::with_capacity(tokens.len());
        for (i, &tok) in tokens.iter().enumerate() {
            let lpn = start + i as u64;
            self.check_lpn(lpn)?;
            let g = self.group_of_lpn(lpn);
            self.maybe_gc(ssd, g, now)?;
            let ppn = self.alloc_host(ssd, g, now)?;
            done = done.max(ssd.program(
                ppn,
                PageOwner::Data(lpn),
                tok,
                None,
                OpClass::DataWrite,
                now,
            )?);
            self.space.models[entry_of(lpn) as usize].clear_bit((lpn % ENTRY_SPAN as u64) as u16);
            self.space.groups[g].touched_since_gc += 1;
            if let Some(old) = self.map.stage_write(lpn, ppn) {
                ssd.nand.invalidate_page(old)?;
            }
            placed.push((lpn, ppn));
        }
        // Mapping write-backs go after the data so the data stays contiguous.
        done = done.max(self.map.settle(ssd, &mut self.space, now)?);
        // Sequential initialization over each per-entry stretch that got
        // consecutive VPPNs and has not been moved by a GC since.
        let mut i = 0;
        while i < placed.len() {
            let (l0, p0) = placed[i];
            if self.map.current(l0) != Some(p0) {
                i += 1;
                continue;
            }
            let v0 = ppn_to_vppn(p0, &self.geom)?;
            let mut j = i + 1;
            while j < placed.len() {
                let (l, p) = placed[j];
                let k = (j - i) as u64;
                if entry_of(l) != entry_of(l0)
                    || self.map.current(l) != Some(p)
                    || ppn_to_vppn(p, &self.geom)?.0 != v0.0 + k
                {
                    break;
                }
                j += 1;
            }
            let off = (l0 % ENTRY_SPAN as u64) as u16;
            if self.space.models[entry_of(l0) as usize].sequential_init(
                off,
                v0,
                j - i,
                self.knobs.max_pieces,
            ) {
                self.stats.sequential_inits += 1;
            }
            i = j;
        }
        Ok(done)
    }

    fn stats(&self) -> FtlStats {
        FtlStats {
            cmt_hits: self.map.cmt.hits,
            cmt_misses: self.map.cmt.misses,
            dirty_evictions: self.map.stats.dirty_evictions,
            pages_lent: self.space.groups.iter().map(|g| g.pages_lent).sum(),
            ..self.stats
        }
    }

    fn gc_log(&self) -> &[GcEvent] {
        &self.gc_log
    }

    fn memory(&self) -> MemoryReport {
        MemoryReport {
            gtd_entries: self.space.layout.entries as u64,
            cmt_capacity_entries: self.map.cmt.capacity() as u64,
            model_bytes: MODEL_BYTES * self.space.layout.entries as u64,
        }
    }

    fn check_consistency(&self, ssd: &Ssd) -> Result<()> {
        check_demand_map(&self.map, self.logical_pages, ssd)?;
        self.space.check_runs()?;
        self.check_models()
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

    fn setup() -> (Ssd, LearnedFtl) {
        let g = FlashGeometry::desk();
        let ftl = LearnedFtl::new(&FtlParams::for_kind(FtlKind::Learnedftl), &g).unwrap();
        (Ssd::new(g, OpCostTable::default()), ftl)
    }

    fn write(ssd: &mut Ssd, ftl: &mut LearnedFtl, start: Lpn, n: usize) {
        let toks: Vec<u64> = (0..n).map(|_| ssd.next_token()).collect();
        ftl.write(ssd, start, &toks, 0).unwrap();
    }

    #[test]
    fn desk_layout() {
        let (_, f) = setup();
        let l = f.layout();
        assert_eq!((l.run_stripes, l.run_pages, l.runs), (2, 512, 32));
        assert_eq!((l.group_entries, l.groups, l.entries), (1, 32, 32));
        assert_eq!(l.run_blocks(0).len(), 8);
    }

    #[test]
    fn consecutive_allocations_have_consecutive_vppns() {
        let (ssd, mut f) = setup();
        let a = f.space.alloc(0, HOST).unwrap();
        let b = f.space.alloc(0, HOST).unwrap();
        let g = *ssd.geometry();
        assert_eq!(
            ppn_to_vppn(b, &g).unwrap().0,
            ppn_to_vppn(a, &g).unwrap().0 + 1
        );
    }

    #[test]
    fn run_fills_then_new_run_acquired() {
        let (_, mut f) = setup();
        for _ in 0..512 {
            f.space.alloc(3, HOST).unwrap();
        }
        assert_eq!(f.space.groups[3].runs.len(), 1);
        f.space.alloc(3, HOST).unwrap();
        assert_eq!(f.space.groups[3].runs.len(), 2);
        assert_eq!(f.space.groups[3].runs_since_gc, 2);
    }

    #[test]
    fn single_page_write_clears_bit() {
        let (mut s, mut f) = setup();
        write(&mut s, &mut f, 0, 512);
        assert!(f.model(0).bitmap.get(7));
        write(&mut s, &mut f, 7, 1);
        assert!(!f.model(0).bitmap.get(7));
        f.check_models().unwrap();
    }

    #[test]
    fn aligned_full_entry_write_trains_whole_entry() {
        let (mut s, mut f) = setup();
        write(&mut s, &mut f, 1024, 512);
        assert_eq!(f.model(2).accurate_lpns(), 512);
        assert_eq!(f.model(2).params.pieces().len(), 1);
        f.check_models().unwrap();
    }

    #[test]
    fn unaligned_write_is_split_per_entry() {
        let (mut s, mut f) = setup();
        write(&mut s, &mut f, 500, 30);
        assert_eq!(f.model(0).accurate_lpns(), 12);
        assert_eq!(f.model(1).accurate_lpns(), 18);
        f.check_models().unwrap();
    }

    #[test]
    fn group_gc_trains_dense_group_fully() {
        let (mut s, mut f) = setup();
        for k in 0..4 {
            write(&mut s, &mut f, 512 + k * 128, 128);
        }
        for l in (512..1024).step_by(3) {
            write(&mut s, &mut f, l, 1);
        }
        f.gc_group(&mut s, 1, 0).unwrap();
        assert_eq!(f.model(1).accurate_lpns(), 512);
        let ev = f.gc_log().last().unwrap();
        assert!(ev.translation_writes <= 64);
        f.check_consistency(&s).unwrap();
        assert_eq!(s.nand.block(f.layout().run_blocks(0)[0]).invalid_count, 0);
    }

    #[test]
    fn gc_of_empty_group_is_harmless() {
        let (mut s, mut f) = setup();
        f.gc_group(&mut s, 5, 0).unwrap();
        assert_eq!(f.gc_log().last().unwrap().pages_moved, 0);
        f.check_consistency(&s).unwrap();
    }

    #[test]
    fn victim_is_most_invalid_lowest_id_on_tie() {
        let (mut s, mut f) = setup();
        write(&mut s, &mut f, 0, 64);
        write(&mut s, &mut f, 512, 64);
        write(&mut s, &mut f, 0, 10);
        write(&mut s, &mut f, 512, 40);
        assert_eq!(f.space.select_victim(&s), Some((1, 40)));
        write(&mut s, &mut f, 10, 30);
        assert_eq!(f.space.select_victim(&s), Some((0, 40)));
    }

    #[test]
    fn borrowing_is_double_entry() {
        let (_, mut f) = setup();
        // exhaust free runs (keeping the reserve) with other groups
        while f.space.free_runs() > f.space.reserve {
            let g = f.space.free_runs() % 8 + 1;
            f.space.groups[g].open = None;
            f.space.alloc(g, HOST).unwrap();
        }
        let p = f.space.alloc(0, HOST).unwrap();
        let r = f.layout().run_of_vppn(ppn_to_vppn(p, &f.geom).unwrap());
        assert_ne!(f.space.runs[r].owner, Some(0));
        assert_eq!(f.space.groups[0].pages_borrowed, 1);
        assert!(f.space.lending_balanced());
    }
}
