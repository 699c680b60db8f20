//! NAND array emulation: page states, in-order programming, OOB metadata,
//! erase, and per-class operation counters.
//!
//! Payloads are never stored. A page carries the `(owner, token)` pair that
//! identifies the last writer, which is all the oracle needs.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::geometry::{ChipId, FlashGeometry, Lpn, Ppn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PageState {
    Free,
    Valid,
    Invalid,
}

/// What a page holds, recorded in its OOB area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PageOwner {
    Data(Lpn),
    /// A translation page for the given GTD entry.
    Translation(u32),
}

const OWNER_NONE: u64 = u64::MAX;
const OWNER_TRANSLATION_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, Copy)]
pub struct FlashPage {
    state: PageState,
    has_err: bool,
    err: (i16, i16),
    owner: u64,
    token: u64,
}

impl FlashPage {
    const FREE: FlashPage = FlashPage {
        state: PageState::Free,
        has_err: false,
        err: (0, 0),
        owner: OWNER_NONE,
        token: 0,
    };

    pub fn state(&self) -> PageState {
        self.state
    }

    pub fn owner(&self) -> Option<PageOwner> {
        match self.owner {
            OWNER_NONE => None,
            v if v & OWNER_TRANSLATION_BIT != 0 => {
                Some(PageOwner::Translation((v & !OWNER_TRANSLATION_BIT) as u32))
            }
            v => Some(PageOwner::Data(v)),
        }
    }

    pub fn token(&self) -> Option<u64> {
        (self.state != PageState::Free).then_some(self.token)
    }

    pub fn error_interval(&self) -> Option<(i16, i16)> {
        self.has_err.then_some(self.err)
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FlashBlock {
    pub write_pointer: u32,
    pub erase_count: u64,
    pub valid_count: u32,
    pub invalid_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpCostTable {
    pub read_us: f64,
    pub write_us: f64,
    pub erase_us: f64,
    pub read_energy: f64,
    pub write_energy: f64,
    pub erase_energy: f64,
}

impl Default for OpCostTable {
    fn default() -> Self {
        OpCostTable {
            read_us: 40.0,
            write_us: 200.0,
            erase_us: 2000.0,
            read_energy: 1.0,
            write_energy: 5.0,
            erase_energy: 50.0,
        }
    }
}

impl OpCostTable {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.read_us,
            self.write_us,
            self.erase_us,
            self.read_energy,
            self.write_energy,
            self.erase_energy,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SimError::Config(
                "latency/energy costs must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpClass {
    DataRead,
    TranslationRead,
    GcRead,
    DataWrite,
    TranslationWrite,
    GcWrite,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashCounters {
    pub data_read: u64,
    pub translation_read: u64,
    pub data_write: u64,
    pub translation_write: u64,
    pub gc_read: u64,
    pub gc_write: u64,
    pub erase: u64,
}

impl FlashCounters {
    fn bump(&mut self, class: OpClass) {
        match class {
            OpClass::DataRead => self.data_read += 1,
            OpClass::TranslationRead => self.translation_read += 1,
            OpClass::GcRead => self.gc_read += 1,
            OpClass::DataWrite => self.data_write += 1,
            OpClass::TranslationWrite => self.translation_write += 1,
            OpClass::GcWrite => self.gc_write += 1,
        }
    }

    pub fn total_reads(&self) -> u64 {
        self.data_read + self.translation_read + self.gc_read
    }

    pub fn total_writes(&self) -> u64 {
        self.data_write + self.translation_write + self.gc_write
    }

    /// Component-wise `self - earlier`.
    pub fn since(&self, earlier: &FlashCounters) -> FlashCounters {
        FlashCounters {
            data_read: self.data_read - earlier.data_read,
            translation_read: self.translation_read - earlier.translation_read,
            data_write: self.data_write - earlier.data_write,
            translation_write: self.translation_write - earlier.translation_write,
            gc_read: self.gc_read - earlier.gc_read,
            gc_write: self.gc_write - earlier.gc_write,
            erase: self.erase - earlier.erase,
        }
    }

    pub fn energy(&self, costs: &OpCostTable) -> f64 {
        self.total_reads() as f64 * costs.read_energy
            + self.total_writes() as f64 * costs.write_energy
            + self.erase as f64 * costs.erase_energy
    }
}

/// A flash operation's footprint: which chip it occupies and for how long.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEvent {
    pub chip: ChipId,
    pub duration_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageRead {
    pub state: PageState,
    pub owner: PageOwner,
    pub token: u64,
    pub error_interval: Option<(i16, i16)>,
}

pub fn us_to_ns(us: f64) -> u64 {
    (us * 1000.0).round() as u64
}

#[derive(Debug, Clone)]
pub struct NandArray {
    geom: FlashGeometry,
    pages: Vec<FlashPage>,
    blocks: Vec<FlashBlock>,
    counters: FlashCounters,
    read_ns: u64,
    write_ns: u64,
    erase_ns: u64,
    free_pages: u64,
    valid_pages: u64,
    invalid_pages: u64,
}

impl NandArray {
    pub fn new(geom: FlashGeometry, costs: &OpCostTable) -> Self {
        let total = geom.total_pages();
        NandArray {
            geom,
            pages: vec![FlashPage::FREE; total as usize],
            blocks: vec![FlashBlock::default(); geom.total_blocks() as usize],
            counters: FlashCounters::default(),
            read_ns: us_to_ns(costs.read_us),
            write_ns: us_to_ns(costs.write_us),
            erase_ns: us_to_ns(costs.erase_us),
            free_pages: total,
            valid_pages: 0,
            invalid_pages: 0,
        }
    }

    pub fn geometry(&self) -> &FlashGeometry {
        &self.geom
    }

    pub fn counters(&self) -> &FlashCounters {
        &self.counters
    }

    pub fn read_ns(&self) -> u64 {
        self.read_ns
    }

    pub fn write_ns(&self) -> u64 {
        self.write_ns
    }

    pub fn erase_ns(&self) -> u64 {
        self.erase_ns
    }

    /// (free, valid, invalid) page totals.
    pub fn page_totals(&self) -> (u64, u64, u64) {
        (self.free_pages, self.valid_pages, self.invalid_pages)
    }

    fn index(&self, ppn: Ppn) -> Result<usize> {
        if ppn.0 >= self.geom.total_pages() {
            return Err(SimError::Address(format!("ppn {} out of range", ppn.0)));
        }
        Ok(ppn.0 as usize)
    }

    pub fn block(&self, block_id: u64) -> &FlashBlock {
        &self.blocks[block_id as usize]
    }

    /// OOB inspection without issuing a flash command.
    pub fn peek(&self, ppn: Ppn) -> &FlashPage {
        &self.pages[ppn.0 as usize]
    }

    pub fn program_page(
        &mut self,
        ppn: Ppn,
        owner: PageOwner,
        token: u64,
        error_interval: Option<(i16, i16)>,
        class: OpClass,
    ) -> Result<CostEvent> {
        let idx = self.index(ppn)?;
        let ppb = self.geom.pages_per_block as u64;
        let block_id = ppn.0 / ppb;
        let offset = (ppn.0 % ppb) as u32;
        if self.pages[idx].state != PageState::Free {
            return Err(SimError::DeviceRule(format!(
                "program of non-free page {}",
                ppn.0
            )));
        }
        let blk = &mut self.blocks[block_id as usize];
        if offset != blk.write_pointer {
            return Err(SimError::DeviceRule(format!(
                "out-of-order program: page {offset} of block {block_id}, write pointer {}",
                blk.write_pointer
            )));
        }
        blk.write_pointer += 1;
        blk.valid_count += 1;
        let raw_owner = match owner {
            PageOwner::Data(lpn) => {
                debug_assert!(lpn & OWNER_TRANSLATION_BIT == 0);
                lpn
            }
            PageOwner::Translation(e) => e as u64 | OWNER_TRANSLATION_BIT,
        };
        self.pages[idx] = FlashPage {
            state: PageState::Valid,
            has_err: error_interval.is_some(),
            err: error_interval.unwrap_or((0, 0)),
            owner: raw_owner,
            token,
        };
        self.free_pages -= 1;
        self.valid_pages += 1;
        self.counters.bump(class);
        Ok(CostEvent {
            chip: self.geom.chip_of_ppn(ppn),
            duration_ns: self.write_ns,
        })
    }

    pub fn read_page(&mut self, ppn: Ppn, class: OpClass) -> Result<(PageRead, CostEvent)> {
        let idx = self.index(ppn)?;
        let p = self.pages[idx];
        if p.state == PageState::Free {
            return Err(SimError::DeviceRule(format!("read of free page {}", ppn.0)));
        }
        self.counters.bump(class);
        let read = PageRead {
            state: p.state,
            owner: p.owner().expect("programmed page has an owner"),
            token: p.token,
            error_interval: p.error_interval(),
        };
        Ok((
            read,
            CostEvent {
                chip: self.geom.chip_of_ppn(ppn),
                duration_ns: self.read_ns,
            },
        ))
    }

    /// Read that tolerates an erased page (returns `None` for it), used when
    /// a learned index may point at a location that has since been erased.
    pub fn read_page_lenient(
        &mut self,
        ppn: Ppn,
        class: OpClass,
    ) -> Result<(Option<PageRead>, CostEvent)> {
        let idx = self.index(ppn)?;
        if self.pages[idx].state == PageState::Free {
            self.counters.bump(class);
            return Ok((
                None,
                CostEvent {
                    chip: self.geom.chip_of_ppn(ppn),
                    duration_ns: self.read_ns,
                },
            ));
        }
        let (r, c) = self.read_page(ppn, class)?;
        Ok((Some(r), c))
    }

    pub fn invalidate_page(&mut self, ppn: Ppn) -> Result<()> {
        let idx = self.index(ppn)?;
        if self.pages[idx].state != PageState::Valid {
            return Err(SimError::DeviceRule(format!(
                "invalidate of {:?} page {}",
                self.pages[idx].state, ppn.0
            )));
        }
        self.pages[idx].state = PageState::Invalid;
        let blk = &mut self.blocks[(ppn.0 / self.geom.pages_per_block as u64) as usize];
        blk.valid_count -= 1;
        blk.invalid_count += 1;
        self.valid_pages -= 1;
        self.invalid_pages += 1;
        Ok(())
    }

    pub fn erase_block(&mut self, block_id: u64) -> Result<CostEvent> {
        if block_id >= self.geom.total_blocks() {
            return Err(SimError::Address(format!("block {block_id} out of range")));
        }
        let ppb = self.geom.pages_per_block as u64;
        let blk = self.blocks[block_id as usize];
        if blk.valid_count > 0 {
            return Err(SimError::DeviceRule(format!(
                "erase of block {block_id} with {} valid pages",
                blk.valid_count
            )));
        }
        let start = (block_id * ppb) as usize;
        for p in &mut self.pages[start..start + blk.write_pointer as usize] {
            *p = FlashPage::FREE;
        }
        self.free_pages += blk.write_pointer as u64;
        self.invalid_pages -= blk.invalid_count as u64;
        let b = &mut self.blocks[block_id as usize];
        b.write_pointer = 0;
        b.valid_count = 0;
        b.invalid_count = 0;
        b.erase_count += 1;
        self.counters.erase += 1;
        Ok(CostEvent {
            chip: self.geom.chip_of_ppn(Ppn(block_id * ppb)),
            duration_ns: self.erase_ns,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn array(pages_per_block: u32) -> NandArray {
        let g = FlashGeometry::new(1, 1, 1, 2, pages_per_block, 4096).unwrap();
        NandArray::new(g, &OpCostTable::default())
    }

    #[test]
    fn program_advances_write_pointer() {
        let mut n = array(4);
        let ev = n
            .program_page(Ppn(0), PageOwner::Data(7), 1, None, OpClass::DataWrite)
            .unwrap();
        assert_eq!(ev.duration_ns, 200_000);
        assert_eq!(n.block(0).write_pointer, 1);
        assert_eq!(n.peek(Ppn(0)).state(), PageState::Valid);
    }

    #[test]
    fn out_of_order_program_is_violation() {
        let mut n = array(4);
        n.program_page(Ppn(0), PageOwner::Data(0), 1, None, OpClass::DataWrite)
            .unwrap();
        let e = n.program_page(Ppn(2), PageOwner::Data(0), 2, None, OpClass::DataWrite);
        assert!(matches!(e, Err(SimError::DeviceRule(_))));
    }

    #[test]
    fn overfilling_a_block_is_violation() {
        let mut n = array(512);
        for i in 0..512 {
            n.program_page(Ppn(i), PageOwner::Data(i), i + 1, None, OpClass::DataWrite)
                .unwrap();
        }
        // page 512 is page 0 of the next block, which is fine; page 511 again is not
        assert!(n
            .program_page(Ppn(511), PageOwner::Data(0), 9, None, OpClass::DataWrite)
            .is_err());
        assert_eq!(n.block(0).write_pointer, 512);
    }

    #[test]
    fn read_returns_oob_including_stale() {
        let mut n = array(4);
        n.program_page(
            Ppn(0),
            PageOwner::Data(3),
            11,
            Some((-2, 1)),
            OpClass::DataWrite,
        )
        .unwrap();
        let (r, _) = n.read_page(Ppn(0), OpClass::DataRead).unwrap();
        assert_eq!(
            (r.owner, r.token, r.error_interval),
            (PageOwner::Data(3), 11, Some((-2, 1)))
        );
        n.invalidate_page(Ppn(0)).unwrap();
        let (r, _) = n.read_page(Ppn(0), OpClass::DataRead).unwrap();
        assert_eq!(r.state, PageState::Invalid);
        assert_eq!(r.token, 11);
        n.read_page(Ppn(0), OpClass::DataRead).unwrap();
        assert_eq!(n.counters().data_read, 3);
        assert!(n.read_page(Ppn(1), OpClass::DataRead).is_err());
    }

    #[test]
    fn erase_rules() {
        let mut n = array(512);
        for i in 0..512 {
            n.program_page(Ppn(i), PageOwner::Data(i), i + 1, None, OpClass::DataWrite)
                .unwrap();
        }
        n.invalidate_page(Ppn(0)).unwrap();
        assert!(matches!(n.erase_block(0), Err(SimError::DeviceRule(_))));
        for i in 1..512 {
            n.invalidate_page(Ppn(i)).unwrap();
        }
        n.erase_block(0).unwrap();
        assert_eq!(n.page_totals(), (1024, 0, 0));
        assert!((0..512).all(|i| n.peek(Ppn(i)).state() == PageState::Free));
        n.erase_block(0).unwrap();
        assert_eq!(n.block(0).erase_count, 2);
    }

    #[test]
    fn invalidate_rules_and_counts() {
        let mut n = array(4);
        assert!(n.invalidate_page(Ppn(0)).is_err());
        n.program_page(Ppn(0), PageOwner::Data(1), 1, None, OpClass::DataWrite)
            .unwrap();
        n.program_page(Ppn(1), PageOwner::Data(1), 2, None, OpClass::DataWrite)
            .unwrap();
        n.invalidate_page(Ppn(0)).unwrap();
        assert!(n.invalidate_page(Ppn(0)).is_err());
        assert_eq!(n.block(0).valid_count, 1);
        assert_eq!(n.block(0).invalid_count, 1);
        let (f, v, i) = n.page_totals();
        assert_eq!(f + v + i, 8);
    }

    #[test]
    fn translation_owner_roundtrip() {
        let mut n = array(4);
        n.program_page(
            Ppn(0),
            PageOwner::Translation(5),
            1,
            None,
            OpClass::TranslationWrite,
        )
        .unwrap();
        assert_eq!(n.peek(Ppn(0)).owner(), Some(PageOwner::Translation(5)));
        assert_eq!(n.counters().translation_write, 1);
    }
}
