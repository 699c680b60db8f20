//! DFTL, and TPFTL as DFTL plus request-length prefetch.

use std::any::Any;

use crate::alloc::{DynAlloc, GcEpisode};
use crate::device::Ssd;
use crate::error::{Result, SimError};
use crate::geometry::{FlashGeometry, Lpn};
use crate::mapping::{Loaded, MappingTable};
use crate::nand::{OpClass, PageOwner};

use super::{
    check_mapped_page, gtd_entries, Ftl, FtlKind, FtlParams, FtlStats, GcEvent, HitSource,
    MemoryReport, ReadClass, ReadOutcome,
};

pub struct DemandFtl {
    kind: FtlKind,
    map: MappingTable,
    alloc: DynAlloc,
    logical_pages: u64,
    stats: FtlStats,
    gc_log: Vec<GcEvent>,
}

/// Apply a dynamic-GC episode to a demand-based map: translation pages get
/// new GTD pointers, relocated data goes into the CMT as dirty mappings.
pub(crate) fn apply_moves(
    map: &mut MappingTable,
    alloc: &mut DynAlloc,
    ssd: &mut Ssd,
    ep: &GcEpisode,
    now: u64,
) -> Result<()> {
    for m in &ep.moves {
        if let PageOwner::Translation(e) = m.owner {
            map.store.set_translation_ppn(e, m.new);
        }
    }
    for m in &ep.moves {
        if let PageOwner::Data(lpn) = m.owner {
            map.insert(lpn, m.new, true, ssd, alloc, now)?;
        }
    }
    Ok(())
}

impl DemandFtl {
    pub fn new(params: &FtlParams, geom: &FlashGeometry) -> Result<Self> {
        let logical = params.logical_pages(geom);
        Ok(DemandFtl {
            kind: params.kind,
            map: MappingTable::new(
                gtd_entries(geom) as usize,
                params.cmt_capacity(geom),
                params.effective_prefetch(),
                logical,
            ),
            alloc: DynAlloc::new(geom, params.dyn_free_blocks),
            logical_pages: logical,
            stats: FtlStats::default(),
            gc_log: Vec::new(),
        })
    }

    pub fn mapping(&self) -> &MappingTable {
        &self.map
    }

    fn gc(&mut self, ssd: &mut Ssd, now: u64) -> Result<()> {
        while self.alloc.needs_gc() {
            let before = ssd.nand.counters().translation_write;
            let Some(ep) = self.alloc.collect(ssd, now)? else {
                break;
            };
            apply_moves(&mut self.map, &mut self.alloc, ssd, &ep, now)?;
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
        Ok(())
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

impl Ftl for DemandFtl {
    fn kind(&self) -> FtlKind {
        self.kind
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
        match self
            .map
            .load_mapping(lpn, request_len, ssd, &mut self.alloc, now)?
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
        for (i, &tok) in tokens.iter().enumerate() {
            let lpn = start + i as u64;
            self.check_lpn(lpn)?;
            self.gc(ssd, now)?;
            let ppn = self
                .alloc
                .alloc_data(ssd)
                .ok_or_else(|| SimError::CapacityExhausted("no free data page".into()))?;
            done = done.max(ssd.program(
                ppn,
                PageOwner::Data(lpn),
                tok,
                None,
                OpClass::DataWrite,
                now,
            )?);
            let (old, t) = self
                .map
                .update_on_write(lpn, ppn, ssd, &mut self.alloc, now)?;
            done = done.max(t);
            if let Some(old) = old {
                ssd.nand.invalidate_page(old)?;
            }
        }
        Ok(done)
    }

    fn stats(&self) -> FtlStats {
        FtlStats {
            cmt_hits: self.map.cmt.hits,
            cmt_misses: self.map.cmt.misses,
            dirty_evictions: self.map.stats.dirty_evictions,
            ..self.stats
        }
    }

    fn gc_log(&self) -> &[GcEvent] {
        &self.gc_log
    }

    fn memory(&self) -> MemoryReport {
        MemoryReport {
            gtd_entries: self.map.store.entries() as u64,
            cmt_capacity_entries: self.map.cmt.capacity() as u64,
            model_bytes: 0,
        }
    }

    fn check_consistency(&self, ssd: &Ssd) -> Result<()> {
        check_demand_map(&self.map, self.logical_pages, ssd)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

pub(crate) fn check_demand_map(map: &MappingTable, logical_pages: u64, ssd: &Ssd) -> Result<()> {
    for e in 0..map.store.entries() as u32 {
        if let Some(tp) = map.store.translation_ppn(e) {
            check_mapped_page(ssd, PageOwner::Translation(e), tp)?;
        }
    }
    for lpn in 0..logical_pages {
        if let Some(p) = map.current(lpn) {
            check_mapped_page(ssd, PageOwner::Data(lpn), p)?;
        }
    }
    Ok(())
}
