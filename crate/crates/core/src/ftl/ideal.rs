//! Full in-memory page map: no translation traffic at all.

use std::any::Any;

use crate::alloc::DynAlloc;
use crate::device::Ssd;
use crate::error::{Result, SimError};
use crate::geometry::{FlashGeometry, Lpn, Ppn};
use crate::nand::{OpClass, PageOwner};

use super::{
    check_mapped_page, Ftl, FtlKind, FtlParams, FtlStats, GcEvent, HitSource, MemoryReport,
    ReadClass, ReadOutcome,
};

const NONE: u64 = u64::MAX;

pub struct IdealFtl {
    table: Vec<u64>,
    alloc: DynAlloc,
    stats: FtlStats,
    gc_log: Vec<GcEvent>,
}

impl IdealFtl {
    pub fn new(params: &FtlParams, geom: &FlashGeometry) -> Result<Self> {
        Ok(IdealFtl {
            table: vec![NONE; params.logical_pages(geom) as usize],
            alloc: DynAlloc::new(geom, params.dyn_free_blocks),
            stats: FtlStats::default(),
            gc_log: Vec::new(),
        })
    }

    fn gc(&mut self, ssd: &mut Ssd, now: u64) -> Result<()> {
        while self.alloc.needs_gc() {
            let Some(ep) = self.alloc.collect(ssd, now)? else {
                break;
            };
            for m in &ep.moves {
                if let PageOwner::Data(lpn) = m.owner {
                    self.table[lpn as usize] = m.new.0;
                }
            }
            self.stats.gc_count += 1;
            self.stats.gc_pages_moved += ep.moves.len() as u64;
            self.gc_log.push(GcEvent {
                time_ns: now,
                victim: ep.victim,
                pages_moved: ep.moves.len() as u64,
                translation_writes: 0,
                trained_entries: 0,
                accurate_bits: 0,
                gathered: true,
            });
        }
        Ok(())
    }
}

impl Ftl for IdealFtl {
    fn kind(&self) -> FtlKind {
        FtlKind::Ideal
    }

    fn read(
        &mut self,
        ssd: &mut Ssd,
        lpn: Lpn,
        _request_len: u32,
        now: u64,
    ) -> Result<ReadOutcome> {
        let Some(&p) = self.table.get(lpn as usize) else {
            return Err(SimError::Address(format!(
                "lpn {lpn} beyond logical capacity"
            )));
        };
        if p == NONE {
            return Ok(ReadOutcome::unmapped(now));
        }
        let (r, done) = ssd.read(Ppn(p), OpClass::DataRead, now)?;
        Ok(ReadOutcome {
            token: Some(r.token),
            class: Some(ReadClass::Single),
            source: HitSource::Cmt,
            done,
        })
    }

    fn write(&mut self, ssd: &mut Ssd, start: Lpn, tokens: &[u64], now: u64) -> Result<u64> {
        let mut done = now;
        for (i, &tok) in tokens.iter().enumerate() {
            let lpn = start + i as u64;
            if lpn as usize >= self.table.len() {
                return Err(SimError::Address(format!(
                    "lpn {lpn} beyond logical capacity"
                )));
            }
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
            let old = std::mem::replace(&mut self.table[lpn as usize], ppn.0);
            if old != NONE {
                ssd.nand.invalidate_page(Ppn(old))?;
            }
        }
        Ok(done)
    }

    fn stats(&self) -> FtlStats {
        self.stats
    }

    fn gc_log(&self) -> &[GcEvent] {
        &self.gc_log
    }

    fn memory(&self) -> MemoryReport {
        MemoryReport {
            gtd_entries: 0,
            cmt_capacity_entries: self.table.len() as u64,
            model_bytes: 0,
        }
    }

    fn check_consistency(&self, ssd: &Ssd) -> Result<()> {
        for (lpn, &p) in self.table.iter().enumerate() {
            if p != NONE {
                check_mapped_page(ssd, PageOwner::Data(lpn as u64), Ppn(p))?;
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
