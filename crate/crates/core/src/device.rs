//! The simulated SSD: flash array, per-chip timeline and the token sequence.

use crate::error::Result;
use crate::geometry::{ChipId, FlashGeometry, Ppn};
use crate::nand::{CostEvent, NandArray, OpClass, OpCostTable, PageOwner, PageRead};

/// Next-free time of every chip, in nanoseconds.
///
/// Channel transfer is folded into the chip op latency, so a chip is the only
/// shared resource.
#[derive(Debug, Clone)]
pub struct ChipTimeline {
    next_free: Vec<u64>,
}

impl ChipTimeline {
    pub fn new(chips: usize) -> Self {
        ChipTimeline {
            next_free: vec![0; chips],
        }
    }

    /// Reserve `duration` on `chip` no earlier than `earliest`; returns the
    /// completion time.
    pub fn schedule(&mut self, chip: ChipId, earliest: u64, duration: u64) -> u64 {
        let start = earliest.max(self.next_free[chip]);
        let done = start + duration;
        self.next_free[chip] = done;
        done
    }

    pub fn next_free(&self, chip: ChipId) -> u64 {
        self.next_free[chip]
    }

    pub fn chips(&self) -> usize {
        self.next_free.len()
    }

    /// Hold every chip until at least `t`.
    pub fn block_all_until(&mut self, t: u64) {
        for nf in &mut self.next_free {
            *nf = (*nf).max(t);
        }
    }

    pub fn horizon(&self) -> u64 {
        self.next_free.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct Ssd {
    pub nand: NandArray,
    pub timeline: ChipTimeline,
    pub costs: OpCostTable,
    /// GC holds every chip, not just the ones it touches.
    pub gc_block_all: bool,
    next_token: u64,
}

impl Ssd {
    pub fn new(geom: FlashGeometry, costs: OpCostTable) -> Self {
        Ssd {
            nand: NandArray::new(geom, &costs),
            timeline: ChipTimeline::new(geom.chips()),
            costs,
            gc_block_all: false,
            next_token: 1,
        }
    }

    pub fn geometry(&self) -> &FlashGeometry {
        self.nand.geometry()
    }

    pub fn next_token(&mut self) -> u64 {
        let t = self.next_token;
        self.next_token += 1;
        t
    }

    fn occupy(&mut self, ev: CostEvent, earliest: u64) -> u64 {
        self.timeline.schedule(ev.chip, earliest, ev.duration_ns)
    }

    pub fn read(&mut self, ppn: Ppn, class: OpClass, earliest: u64) -> Result<(PageRead, u64)> {
        let (r, ev) = self.nand.read_page(ppn, class)?;
        Ok((r, self.occupy(ev, earliest)))
    }

    pub fn read_lenient(
        &mut self,
        ppn: Ppn,
        class: OpClass,
        earliest: u64,
    ) -> Result<(Option<PageRead>, u64)> {
        let (r, ev) = self.nand.read_page_lenient(ppn, class)?;
        Ok((r, self.occupy(ev, earliest)))
    }

    pub fn program(
        &mut self,
        ppn: Ppn,
        owner: PageOwner,
        token: u64,
        error_interval: Option<(i16, i16)>,
        class: OpClass,
        earliest: u64,
    ) -> Result<u64> {
        let ev = self
            .nand
            .program_page(ppn, owner, token, error_interval, class)?;
        Ok(self.occupy(ev, earliest))
    }

    pub fn erase(&mut self, block_id: u64, earliest: u64) -> Result<u64> {
        let ev = self.nand.erase_block(block_id)?;
        Ok(self.occupy(ev, earliest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idle_chip_read_takes_read_latency() {
        let mut t = ChipTimeline::new(4);
        assert_eq!(t.schedule(0, 0, 40_000), 40_000);
    }

    #[test]
    fn same_chip_serializes() {
        let mut t = ChipTimeline::new(4);
        assert_eq!(t.schedule(1, 0, 40_000), 40_000);
        assert_eq!(t.schedule(1, 0, 40_000), 80_000);
    }

    #[test]
    fn different_chips_overlap() {
        let mut t = ChipTimeline::new(4);
        assert_eq!(t.schedule(0, 0, 40_000), 40_000);
        assert_eq!(t.schedule(1, 0, 40_000), 40_000);
    }

    #[test]
    fn dependent_op_waits_for_predecessor() {
        let mut t = ChipTimeline::new(2);
        let first = t.schedule(0, 0, 40_000);
        assert_eq!(t.schedule(1, first, 40_000), 80_000);
    }
}
