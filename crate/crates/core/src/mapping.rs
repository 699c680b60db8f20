//! Demand-based mapping hierarchy: GTD, on-flash translation pages and the
//! cached mapping table (CMT).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::device::Ssd;
use crate::error::Result;
use crate::geometry::{Lpn, Ppn};
use crate::learned::ENTRY_SPAN;
use crate::nand::{OpClass, PageOwner};

const NO_PPN: u64 = u64::MAX;

pub fn entry_of(lpn: Lpn) -> u32 {
    (lpn / ENTRY_SPAN as u64) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CmtSlot {
    ppn: Ppn,
    dirty: bool,
    stamp: u64,
}

/// A mapping pushed out of the CMT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evicted {
    pub lpn: Lpn,
    pub ppn: Ppn,
    pub dirty: bool,
}

/// LRU cache of individual LPN->PPN mappings.
#[derive(Debug, Clone)]
pub struct Cmt {
    capacity: usize,
    slots: HashMap<Lpn, CmtSlot>,
    lru: BTreeMap<u64, Lpn>,
    dirty_by_entry: BTreeMap<u32, BTreeSet<Lpn>>,
    clock: u64,
    pub hits: u64,
    pub misses: u64,
}

impl Cmt {
    pub fn new(capacity: usize) -> Self {
        Cmt {
            capacity,
            slots: HashMap::new(),
            lru: BTreeMap::new(),
            dirty_by_entry: BTreeMap::new(),
            clock: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn touch(&mut self, lpn: Lpn) {
        self.clock += 1;
        let stamp = self.clock;
        let slot = self.slots.get_mut(&lpn).expect("resident");
        self.lru.remove(&slot.stamp);
        slot.stamp = stamp;
        self.lru.insert(stamp, lpn);
    }

    fn set_dirty(&mut self, lpn: Lpn, dirty: bool) {
        let slot = self.slots.get_mut(&lpn).expect("resident");
        if slot.dirty == dirty {
            return;
        }
        slot.dirty = dirty;
        let e = entry_of(lpn);
        if dirty {
            self.dirty_by_entry.entry(e).or_default().insert(lpn);
        } else if let Some(set) = self.dirty_by_entry.get_mut(&e) {
            set.remove(&lpn);
            if set.is_empty() {
                self.dirty_by_entry.remove(&e);
            }
        }
    }

    /// Host lookup: counts a hit or a miss and refreshes recency on a hit.
    pub fn lookup(&mut self, lpn: Lpn) -> Option<Ppn> {
        match self.slots.get(&lpn).map(|s| s.ppn) {
            Some(p) => {
                self.hits += 1;
                self.touch(lpn);
                Some(p)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    /// Side-effect free probe.
    pub fn peek(&self, lpn: Lpn) -> Option<(Ppn, bool)> {
        self.slots.get(&lpn).map(|s| (s.ppn, s.dirty))
    }

    /// Upsert. A dirty insert marks the slot dirty; a clean insert never
    /// clears an existing dirty flag. Returns the LRU victim if the cache
    /// overflowed.
    pub fn insert(&mut self, lpn: Lpn, ppn: Ppn, dirty: bool) -> Option<Evicted> {
        if self.capacity == 0 && !self.slots.contains_key(&lpn) {
            return Some(Evicted { lpn, ppn, dirty });
        }
        self.insert_unbounded(lpn, ppn, dirty);
        if self.slots.len() > self.capacity {
            return self.evict_lru();
        }
        None
    }

    /// Upsert without evicting; the cache may exceed its capacity until
    /// [`Cmt::evict_lru`] is called.
    pub fn insert_unbounded(&mut self, lpn: Lpn, ppn: Ppn, dirty: bool) {
        if let Some(slot) = self.slots.get_mut(&lpn) {
            slot.ppn = ppn;
            let d = slot.dirty || dirty;
            self.set_dirty(lpn, d);
            self.touch(lpn);
            return;
        }
        self.clock += 1;
        self.slots.insert(
            lpn,
            CmtSlot {
                ppn,
                dirty: false,
                stamp: self.clock,
            },
        );
        self.lru.insert(self.clock, lpn);
        if dirty {
            self.set_dirty(lpn, true);
        }
    }

    pub fn evict_lru(&mut self) -> Option<Evicted> {
        let (&stamp, &victim) = self.lru.iter().next()?;
        self.lru.remove(&stamp);
        let slot = self.slots[&victim];
        self.set_dirty(victim, false);
        self.slots.remove(&victim);
        Some(Evicted {
            lpn: victim,
            ppn: slot.ppn,
            dirty: slot.dirty,
        })
    }

    /// Update the PPN of a resident mapping, optionally marking it dirty,
    /// without touching recency. Returns whether it was resident.
    pub fn repoint(&mut self, lpn: Lpn, ppn: Ppn, dirty: bool) -> bool {
        match self.slots.get_mut(&lpn) {
            Some(slot) => {
                slot.ppn = ppn;
                if dirty {
                    self.set_dirty(lpn, true);
                }
                true
            }
            None => false,
        }
    }

    /// Mark every dirty mapping of `entry` clean and return them.
    pub fn take_dirty_of_entry(&mut self, entry: u32) -> Vec<(Lpn, Ppn)> {
        let Some(set) = self.dirty_by_entry.remove(&entry) else {
            return Vec::new();
        };
        set.into_iter()
            .map(|lpn| {
                let slot = self
                    .slots
                    .get_mut(&lpn)
                    .expect("dirty set tracks residents");
                slot.dirty = false;
                (lpn, slot.ppn)
            })
            .collect()
    }

    pub fn dirty_count(&self) -> usize {
        self.dirty_by_entry.values().map(|s| s.len()).sum()
    }
}

/// GTD plus the contents of every translation page.
///
/// Page contents are kept in memory; the flash page stores only its owner and
/// token, as for data pages.
#[derive(Debug, Clone)]
pub struct TranslationStore {
    gtd: Vec<Option<Ppn>>,
    slots: Vec<u64>,
}

impl TranslationStore {
    pub fn new(entries: usize) -> Self {
        TranslationStore {
            gtd: vec![None; entries],
            slots: vec![NO_PPN; entries * ENTRY_SPAN],
        }
    }

    pub fn entries(&self) -> usize {
        self.gtd.len()
    }

    pub fn translation_ppn(&self, entry: u32) -> Option<Ppn> {
        self.gtd[entry as usize]
    }

    pub fn set_translation_ppn(&mut self, entry: u32, ppn: Ppn) {
        self.gtd[entry as usize] = Some(ppn);
    }

    pub fn slot(&self, lpn: Lpn) -> Option<Ppn> {
        match self.slots[lpn as usize] {
            NO_PPN => None,
            v => Some(Ppn(v)),
        }
    }

    pub fn set_slot(&mut self, lpn: Lpn, ppn: Ppn) {
        self.slots[lpn as usize] = ppn.0;
    }
}

/// Where translation pages get written.
pub trait TranslationAllocator {
    fn alloc_translation(&mut self, ssd: &mut Ssd, entry: u32, now: u64) -> Result<Ppn>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loaded {
    Mapped(Ppn),
    Unmapped,
}

/// Counters for translation traffic caused by the CMT.
#[derive(Debug, Clone, Copy, Default)]
pub struct MappingStats {
    pub dirty_evictions: u64,
    pub writebacks: u64,
}

#[derive(Debug, Clone)]
pub struct MappingTable {
    pub store: TranslationStore,
    pub cmt: Cmt,
    pub prefetch: bool,
    pub stats: MappingStats,
    logical_pages: u64,
}

impl MappingTable {
    pub fn new(entries: usize, cmt_capacity: usize, prefetch: bool, logical_pages: u64) -> Self {
        MappingTable {
            store: TranslationStore::new(entries),
            cmt: Cmt::new(cmt_capacity),
            prefetch,
            stats: MappingStats::default(),
            logical_pages,
        }
    }

    /// Authoritative current mapping, no flash traffic.
    pub fn current(&self, lpn: Lpn) -> Option<Ppn> {
        match self.cmt.peek(lpn) {
            Some((p, _)) => Some(p),
            None => self.store.slot(lpn),
        }
    }

    /// Write `entry`'s translation page back with every dirty CMT mapping it
    /// owns: one translation read (if the page exists) and one translation
    /// write. Returns the completion time.
    pub fn write_back(
        &mut self,
        entry: u32,
        extra: &[(Lpn, Ppn)],
        ssd: &mut Ssd,
        alloc: &mut dyn TranslationAllocator,
        now: u64,
    ) -> Result<u64> {
        let mut t = now;
        let old = self.store.translation_ppn(entry);
        if let Some(old) = old {
            t = ssd.read(old, OpClass::TranslationRead, now)?.1;
        }
        for (lpn, ppn) in self
            .cmt
            .take_dirty_of_entry(entry)
            .into_iter()
            .chain(extra.iter().copied())
        {
            self.store.set_slot(lpn, ppn);
        }
        let new = alloc.alloc_translation(ssd, entry, now)?;
        let token = ssd.next_token();
        let done = ssd.program(
            new,
            PageOwner::Translation(entry),
            token,
            None,
            OpClass::TranslationWrite,
            t,
        )?;
        if let Some(old) = old {
            ssd.nand.invalidate_page(old)?;
        }
        self.store.set_translation_ppn(entry, new);
        self.stats.writebacks += 1;
        Ok(done)
    }

    fn handle_eviction(
        &mut self,
        ev: Option<Evicted>,
        ssd: &mut Ssd,
        alloc: &mut dyn TranslationAllocator,
        now: u64,
    ) -> Result<u64> {
        match ev {
            Some(ev) if ev.dirty => {
                self.stats.dirty_evictions += 1;
                self.write_back(entry_of(ev.lpn), &[(ev.lpn, ev.ppn)], ssd, alloc, now)
            }
            _ => Ok(now),
        }
    }

    /// Insert into the CMT, writing back the victim's translation page if a
    /// dirty mapping was evicted.
    pub fn insert(
        &mut self,
        lpn: Lpn,
        ppn: Ppn,
        dirty: bool,
        ssd: &mut Ssd,
        alloc: &mut dyn TranslationAllocator,
        now: u64,
    ) -> Result<u64> {
        let ev = self.cmt.insert(lpn, ppn, dirty);
        self.handle_eviction(ev, ssd, alloc, now)
    }

    /// Miss path: fetch `lpn`'s mapping from its translation page (one
    /// translation read) and cache it clean. With prefetch, up to
    /// `request_len` consecutive mappings from the same page come along.
    /// Returns the mapping and the time it is known.
    pub fn load_mapping(
        &mut self,
        lpn: Lpn,
        request_len: u32,
        ssd: &mut Ssd,
        alloc: &mut dyn TranslationAllocator,
        now: u64,
    ) -> Result<(Loaded, u64)> {
        let entry = entry_of(lpn);
        let Some(tp) = self.store.translation_ppn(entry) else {
            return Ok((Loaded::Unmapped, now));
        };
        let (_, t) = ssd.read(tp, OpClass::TranslationRead, now)?;
        let Some(ppn) = self.store.slot(lpn) else {
            return Ok((Loaded::Unmapped, t));
        };
        let mut done = self.insert(lpn, ppn, false, ssd, alloc, t)?;
        if self.prefetch && request_len > 1 {
            let end_of_entry = (entry as u64 + 1) * ENTRY_SPAN as u64;
            let last = (lpn + request_len as u64)
                .min(end_of_entry)
                .min(self.logical_pages);
            for l in lpn + 1..last {
                if self.cmt.peek(l).is_some() {
                    continue;
                }
                if let Some(p) = self.store.slot(l) {
                    done = done.max(self.insert(l, p, false, ssd, alloc, t)?);
                }
            }
        }
        Ok((Loaded::Mapped(ppn), t.max(done)))
    }

    /// Record a host write without evicting yet. Pair with [`Self::settle`]
    /// once the request's data pages are placed. Returns the superseded PPN.
    pub fn stage_write(&mut self, lpn: Lpn, new_ppn: Ppn) -> Option<Ppn> {
        let old = self.current(lpn);
        self.cmt.insert_unbounded(lpn, new_ppn, true);
        old
    }

    /// Evict down to capacity, writing back dirty victims.
    pub fn settle(
        &mut self,
        ssd: &mut Ssd,
        alloc: &mut dyn TranslationAllocator,
        now: u64,
    ) -> Result<u64> {
        let mut done = now;
        while self.cmt.len() > self.cmt.capacity() {
            let ev = self.cmt.evict_lru();
            done = done.max(self.handle_eviction(ev, ssd, alloc, now)?);
        }
        Ok(done)
    }

    /// Record a host write: CMT upsert (dirty). Returns the superseded PPN
    /// and the time any eviction write-back finishes.
    pub fn update_on_write(
        &mut self,
        lpn: Lpn,
        new_ppn: Ppn,
        ssd: &mut Ssd,
        alloc: &mut dyn TranslationAllocator,
        now: u64,
    ) -> Result<(Option<Ppn>, u64)> {
        let old = self.current(lpn);
        let t = self.insert(lpn, new_ppn, true, ssd, alloc, now)?;
        Ok((old, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FlashGeometry;
    use crate::nand::OpCostTable;

    /// Hands out pages sequentially from the top of the device.
    struct Bump(u64);
    impl TranslationAllocator for Bump {
        fn alloc_translation(&mut self, _ssd: &mut Ssd, _entry: u32, _now: u64) -> Result<Ppn> {
            self.0 += 1;
            Ok(Ppn(self.0 - 1))
        }
    }

    fn ssd() -> Ssd {
        Ssd::new(FlashGeometry::desk(), OpCostTable::default())
    }

    #[test]
    fn lookup_hit_and_miss() {
        let mut c = Cmt::new(4);
        assert_eq!(c.lookup(3), None);
        c.insert(3, Ppn(9), false);
        assert_eq!(c.lookup(3), Some(Ppn(9)));
        assert_eq!((c.hits, c.misses), (1, 1));
    }

    #[test]
    fn lru_evicts_oldest() {
        let mut c = Cmt::new(2);
        assert!(c.insert(1, Ppn(1), false).is_none());
        assert!(c.insert(2, Ppn(2), false).is_none());
        c.lookup(1);
        let ev = c.insert(3, Ppn(3), false).unwrap();
        assert_eq!(ev.lpn, 2);
        assert!(!ev.dirty);
        assert!(c.len() <= c.capacity());
    }

    #[test]
    fn clean_eviction_costs_nothing() {
        let mut s = ssd();
        let mut m = MappingTable::new(32, 1, false, 15_000);
        let mut a = Bump(8000);
        m.insert(1, Ppn(1), false, &mut s, &mut a, 0).unwrap();
        m.insert(2, Ppn(2), false, &mut s, &mut a, 0).unwrap();
        assert_eq!(
            s.nand.counters().translation_read + s.nand.counters().translation_write,
            0
        );
    }

    #[test]
    fn dirty_eviction_is_one_read_one_write() {
        let mut s = ssd();
        let mut m = MappingTable::new(32, 2, false, 15_000);
        let mut a = Bump(8000);
        // give entry 0 a translation page first
        m.write_back(0, &[], &mut s, &mut a, 0).unwrap();
        let before = *s.nand.counters();
        m.insert(1, Ppn(1), true, &mut s, &mut a, 0).unwrap();
        m.insert(2, Ppn(2), true, &mut s, &mut a, 0).unwrap();
        m.insert(600, Ppn(3), false, &mut s, &mut a, 0).unwrap();
        let d = s.nand.counters().since(&before);
        assert_eq!((d.translation_read, d.translation_write), (1, 1));
        // lpn 2 was co-resident and dirty in the same page: flushed together
        assert_eq!(m.cmt.peek(2), Some((Ppn(2), false)));
        assert_eq!(m.store.slot(1), Some(Ppn(1)));
        assert_eq!(m.store.slot(2), Some(Ppn(2)));
    }

    #[test]
    fn load_mapping_costs_one_translation_read_each() {
        let mut s = ssd();
        let mut m = MappingTable::new(32, 0, false, 15_000);
        let mut a = Bump(8000);
        m.store.set_slot(5, Ppn(50));
        m.store.set_slot(6, Ppn(60));
        m.write_back(0, &[], &mut s, &mut a, 0).unwrap();
        let before = s.nand.counters().translation_read;
        assert_eq!(
            m.load_mapping(5, 1, &mut s, &mut a, 0).unwrap().0,
            Loaded::Mapped(Ppn(50))
        );
        assert_eq!(
            m.load_mapping(6, 1, &mut s, &mut a, 0).unwrap().0,
            Loaded::Mapped(Ppn(60))
        );
        assert_eq!(s.nand.counters().translation_read - before, 2);
    }

    #[test]
    fn unwritten_lpn_is_unmapped() {
        let mut s = ssd();
        let mut m = MappingTable::new(32, 8, false, 15_000);
        let mut a = Bump(8000);
        assert_eq!(
            m.load_mapping(5, 1, &mut s, &mut a, 0).unwrap().0,
            Loaded::Unmapped
        );
        assert_eq!(s.nand.counters().translation_read, 0);
    }

    #[test]
    fn prefetch_loads_request_length() {
        let mut s = ssd();
        let mut m = MappingTable::new(32, 16, true, 15_000);
        let mut a = Bump(8000);
        for l in 10..14 {
            m.store.set_slot(l, Ppn(l * 10));
        }
        m.write_back(0, &[], &mut s, &mut a, 0).unwrap();
        let before = s.nand.counters().translation_read;
        m.load_mapping(10, 4, &mut s, &mut a, 0).unwrap();
        assert_eq!(s.nand.counters().translation_read - before, 1);
        for l in 11..14 {
            assert_eq!(m.cmt.lookup(l), Some(Ppn(l * 10)));
        }
    }

    #[test]
    fn staged_writes_settle_to_capacity() {
        let mut s = ssd();
        let mut m = MappingTable::new(32, 2, false, 15_000);
        let mut a = Bump(8000);
        for l in 0..5 {
            m.stage_write(l, Ppn(l + 100));
        }
        assert_eq!(m.cmt.len(), 5);
        m.settle(&mut s, &mut a, 0).unwrap();
        assert_eq!(m.cmt.len(), 2);
        // all five lpns share one translation page: one batched write
        assert_eq!(s.nand.counters().translation_write, 1);
        for l in 0..5 {
            assert_eq!(m.current(l), Some(Ppn(l + 100)));
        }
    }

    #[test]
    fn write_update_returns_superseded_ppn() {
        let mut s = ssd();
        let mut m = MappingTable::new(32, 8, false, 15_000);
        let mut a = Bump(8000);
        let (old, _) = m.update_on_write(4, Ppn(1), &mut s, &mut a, 0).unwrap();
        assert_eq!(old, None);
        let (old, _) = m.update_on_write(4, Ppn(2), &mut s, &mut a, 0).unwrap();
        assert_eq!(old, Some(Ppn(1)));
        assert_eq!(m.current(4), Some(Ppn(2)));
    }
}
