//! Dynamic page allocation with greedy block GC, used by the baseline FTLs.
//!
//! Each chip has one open data block; a page goes to the chip that frees up
//! first. Translation pages come from a separate open block so that data and
//! mapping traffic never share a block.

use std::collections::BTreeSet;

use crate::device::Ssd;
use crate::error::{Result, SimError};
use crate::geometry::{ChipId, FlashGeometry, Ppn};
use crate::mapping::TranslationAllocator;
use crate::nand::{OpClass, PageOwner, PageState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockUse {
    Free,
    Data,
    Translation,
}

/// A page copied by GC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub owner: PageOwner,
    pub token: u64,
    pub old: Ppn,
    pub new: Ppn,
    /// When the copy finished programming.
    pub done: u64,
}

#[derive(Debug, Clone)]
pub struct GcEpisode {
    pub victim: u64,
    pub moves: Vec<Move>,
    pub done: u64,
}

#[derive(Debug, Clone)]
pub struct DynAlloc {
    geom: FlashGeometry,
    ppb: u64,
    usage: Vec<BlockUse>,
    free: Vec<BTreeSet<u64>>,
    free_total: u64,
    open_data: Vec<Option<u64>>,
    open_translation: Option<u64>,
    gc_threshold: u64,
}

impl DynAlloc {
    /// `gc_threshold`: GC runs while fewer than this many blocks are free.
    pub fn new(geom: &FlashGeometry, gc_threshold: Option<u64>) -> Self {
        let chips = geom.chips();
        let mut free = vec![BTreeSet::new(); chips];
        let ppb = geom.pages_per_block as u64;
        for b in 0..geom.total_blocks() {
            free[geom.chip_of_ppn(Ppn(b * ppb))].insert(b);
        }
        DynAlloc {
            geom: *geom,
            ppb,
            usage: vec![BlockUse::Free; geom.total_blocks() as usize],
            free,
            free_total: geom.total_blocks(),
            open_data: vec![None; chips],
            open_translation: None,
            gc_threshold: gc_threshold.unwrap_or(chips as u64 + 2).max(2),
        }
    }

    pub fn free_blocks(&self) -> u64 {
        self.free_total
    }

    pub fn needs_gc(&self) -> bool {
        self.free_total < self.gc_threshold
    }

    fn chip_of_block(&self, b: u64) -> ChipId {
        self.geom.chip_of_ppn(Ppn(b * self.ppb))
    }

    fn has_room(&self, ssd: &Ssd, open: Option<u64>) -> bool {
        open.is_some_and(|b| (ssd.nand.block(b).write_pointer as u64) < self.ppb)
    }

    fn take_free(&mut self, chip: ChipId, usage: BlockUse) -> Option<u64> {
        let b = self.free[chip].pop_first()?;
        self.free_total -= 1;
        self.usage[b as usize] = usage;
        Some(b)
    }

    fn next_page(&self, ssd: &Ssd, b: u64) -> Ppn {
        Ppn(b * self.ppb + ssd.nand.block(b).write_pointer as u64)
    }

    /// Next data page on the chip that frees up earliest (ties: lowest chip).
    /// The caller must program it before allocating again.
    pub fn alloc_data(&mut self, ssd: &Ssd) -> Option<Ppn> {
        let chip = (0..self.geom.chips())
            .filter(|&c| self.has_room(ssd, self.open_data[c]) || !self.free[c].is_empty())
            .min_by_key(|&c| (ssd.timeline.next_free(c), c))?;
        if !self.has_room(ssd, self.open_data[chip]) {
            self.open_data[chip] = Some(self.take_free(chip, BlockUse::Data)?);
        }
        Some(self.next_page(ssd, self.open_data[chip].expect("just opened")))
    }

    pub fn alloc_translation_page(&mut self, ssd: &Ssd) -> Option<Ppn> {
        if !self.has_room(ssd, self.open_translation) {
            let chip = (0..self.geom.chips())
                .filter(|&c| !self.free[c].is_empty())
                .max_by_key(|&c| (self.free[c].len(), std::cmp::Reverse(c)))?;
            self.open_translation = Some(self.take_free(chip, BlockUse::Translation)?);
        }
        Some(self.next_page(ssd, self.open_translation.expect("just opened")))
    }

    fn is_open(&self, b: u64) -> bool {
        self.open_translation == Some(b) || self.open_data.contains(&Some(b))
    }

    /// Full block with the fewest valid pages (ties: lowest id), if reclaiming
    /// it gains anything.
    pub fn select_victim(&self, ssd: &Ssd) -> Option<u64> {
        (0..self.geom.total_blocks())
            .filter(|&b| self.usage[b as usize] != BlockUse::Free && !self.is_open(b))
            .filter(|&b| ssd.nand.block(b).write_pointer as u64 == self.ppb)
            .map(|b| (ssd.nand.block(b).valid_count, b))
            .filter(|&(v, _)| (v as u64) < self.ppb)
            .min()
            .map(|(_, b)| b)
    }

    /// Greedy GC of one block: copy its valid pages out through the normal
    /// allocator, then erase it. Mapping updates are left to the caller.
    pub fn collect(&mut self, ssd: &mut Ssd, now: u64) -> Result<Option<GcEpisode>> {
        let Some(victim) = self.select_victim(ssd) else {
            return Ok(None);
        };
        let mut moves = Vec::new();
        let mut reads_done = now;
        let mut done = now;
        for p in victim * self.ppb..(victim + 1) * self.ppb {
            let old = Ppn(p);
            if ssd.nand.peek(old).state() != PageState::Valid {
                continue;
            }
            let (r, t_read) = ssd.read(old, OpClass::GcRead, now)?;
            reads_done = reads_done.max(t_read);
            let new = match r.owner {
                PageOwner::Data(_) => self.alloc_data(ssd),
                PageOwner::Translation(_) => self.alloc_translation_page(ssd),
            }
            .ok_or_else(|| SimError::CapacityExhausted("no free block for GC copy".into()))?;
            let t = ssd.program(new, r.owner, r.token, None, OpClass::GcWrite, t_read)?;
            ssd.nand.invalidate_page(old)?;
            done = done.max(t);
            moves.push(Move {
                owner: r.owner,
                token: r.token,
                old,
                new,
                done: t,
            });
        }
        let t_erase = ssd.erase(victim, reads_done)?;
        done = done.max(t_erase);
        self.usage[victim as usize] = BlockUse::Free;
        let chip = self.chip_of_block(victim);
        self.free[chip].insert(victim);
        self.free_total += 1;
        if ssd.gc_block_all {
            ssd.timeline.block_all_until(done);
        }
        Ok(Some(GcEpisode {
            victim,
            moves,
            done,
        }))
    }
}

impl TranslationAllocator for DynAlloc {
    fn alloc_translation(&mut self, ssd: &mut Ssd, _entry: u32, _now: u64) -> Result<Ppn> {
        self.alloc_translation_page(ssd)
            .ok_or_else(|| SimError::CapacityExhausted("no free block for translation page".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nand::OpCostTable;

    fn ssd() -> Ssd {
        Ssd::new(FlashGeometry::desk(), OpCostTable::default())
    }

    fn write_data(a: &mut DynAlloc, s: &mut Ssd, lpn: u64, now: u64) -> Ppn {
        let p = a.alloc_data(s).unwrap();
        let tok = s.next_token();
        s.program(p, PageOwner::Data(lpn), tok, None, OpClass::DataWrite, now)
            .unwrap();
        p
    }

    #[test]
    fn idle_device_spreads_across_chips() {
        let mut s = ssd();
        let mut a = DynAlloc::new(&FlashGeometry::desk(), None);
        let g = FlashGeometry::desk();
        let chips: Vec<_> = (0..4)
            .map(|l| g.chip_of_ppn(write_data(&mut a, &mut s, l, 0)))
            .collect();
        assert_eq!(chips, vec![0, 1, 2, 3]);
    }

    #[test]
    fn busy_chip_is_avoided() {
        let mut s = ssd();
        let mut a = DynAlloc::new(&FlashGeometry::desk(), None);
        s.timeline.schedule(0, 0, 1_000_000);
        let p = write_data(&mut a, &mut s, 0, 0);
        assert_ne!(s.geometry().chip_of_ppn(p), 0);
    }

    #[test]
    fn consecutive_lpns_land_on_different_chips() {
        let mut s = ssd();
        let mut a = DynAlloc::new(&FlashGeometry::desk(), None);
        let p0 = write_data(&mut a, &mut s, 0, 0);
        let p1 = write_data(&mut a, &mut s, 1, 0);
        assert_ne!(s.geometry().chip_of_ppn(p0), s.geometry().chip_of_ppn(p1));
        assert_ne!(p1.0, p0.0 + 1);
    }

    fn fill_and_invalidate(valid_left: u64) -> (Ssd, DynAlloc) {
        let g = FlashGeometry::desk();
        let mut s = ssd();
        let mut a = DynAlloc::new(&g, None);
        // fill the open block on every chip
        let mut pages = Vec::new();
        for l in 0..4 * 64 {
            pages.push(write_data(&mut a, &mut s, l, 0));
        }
        // every block is full; open one more page so they close
        write_data(&mut a, &mut s, 9999, 0);
        for p in pages
            .iter()
            .filter(|p| p.0 / 64 == pages[0].0 / 64)
            .skip(valid_left as usize)
        {
            s.nand.invalidate_page(*p).unwrap();
        }
        (s, a)
    }

    #[test]
    fn all_invalid_victim_is_erase_only() {
        let (mut s, mut a) = fill_and_invalidate(0);
        let before = *s.nand.counters();
        let free_before = a.free_blocks();
        let ep = a.collect(&mut s, 0).unwrap().unwrap();
        assert!(ep.moves.is_empty());
        let d = s.nand.counters().since(&before);
        assert_eq!((d.gc_read, d.gc_write, d.erase), (0, 0, 1));
        assert!(a.free_blocks() > free_before);
    }

    #[test]
    fn victim_with_v_valid_moves_v_pages() {
        let (mut s, mut a) = fill_and_invalidate(5);
        let before = *s.nand.counters();
        let ep = a.collect(&mut s, 0).unwrap().unwrap();
        let d = s.nand.counters().since(&before);
        assert_eq!(ep.moves.len(), 5);
        assert_eq!((d.gc_read, d.gc_write), (5, 5));
        for m in &ep.moves {
            assert_eq!(s.nand.peek(m.new).token(), Some(m.token));
        }
    }

    #[test]
    fn no_victim_when_everything_valid() {
        let g = FlashGeometry::desk();
        let s = ssd();
        let a = DynAlloc::new(&g, None);
        assert_eq!(a.select_victim(&s), None);
    }
}
