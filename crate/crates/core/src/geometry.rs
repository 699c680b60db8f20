//! Flash geometry and the two linearizations of a physical page address.
//!
//! A [`Ppn`] orders the address fields channel, way, plane, block, page from
//! most to least significant, so one block occupies a contiguous PPN range.
//! A [`Vppn`] reorders the same fields as block, page, plane, way, channel,
//! which is the order the allocator walks the device in. Pages written in one
//! round-robin sweep across the parallel units therefore get consecutive
//! VPPNs even though their PPNs are far apart.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Logical page number.
pub type Lpn = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlashGeometry {
    pub channels: u32,
    pub ways_per_channel: u32,
    pub planes_per_chip: u32,
    pub blocks_per_plane: u32,
    pub pages_per_block: u32,
    pub page_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PageAddr {
    pub channel: u32,
    pub way: u32,
    pub plane: u32,
    pub block: u32,
    pub page: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Ppn(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Vppn(pub u64);

/// Index of a chip on the shared timeline, `way * channels + channel`.
///
/// Channel varies fastest so that "lowest index first" tie breaking walks the
/// chips in the same order as the VPPN codec.
pub type ChipId = usize;

impl FlashGeometry {
    pub fn new(
        channels: u32,
        ways_per_channel: u32,
        planes_per_chip: u32,
        blocks_per_plane: u32,
        pages_per_block: u32,
        page_size: u32,
    ) -> Result<Self> {
        let g = FlashGeometry {
            channels,
            ways_per_channel,
            planes_per_chip,
            blocks_per_plane,
            pages_per_block,
            page_size,
        };
        g.validate()?;
        Ok(g)
    }

    /// 8 channels x 8 ways, 256 blocks of 512 4 KiB pages.
    pub fn full_scale() -> Self {
        FlashGeometry {
            channels: 8,
            ways_per_channel: 8,
            planes_per_chip: 1,
            blocks_per_plane: 256,
            pages_per_block: 512,
            page_size: 4096,
        }
    }

    /// 2 channels x 2 ways, 64 blocks of 64 pages (64 MiB).
    pub fn desk() -> Self {
        FlashGeometry {
            channels: 2,
            ways_per_channel: 2,
            planes_per_chip: 1,
            blocks_per_plane: 64,
            pages_per_block: 64,
            page_size: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("channels", self.channels),
            ("ways_per_channel", self.ways_per_channel),
            ("planes_per_chip", self.planes_per_chip),
            ("blocks_per_plane", self.blocks_per_plane),
            ("pages_per_block", self.pages_per_block),
            ("page_size", self.page_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(SimError::Config(format!("geometry.{name} must be >= 1")));
            }
        }
        if !self.page_size.is_power_of_two() {
            return Err(SimError::Config(
                "geometry.page_size must be a power of two".into(),
            ));
        }
        let total = [
            self.ways_per_channel,
            self.planes_per_chip,
            self.blocks_per_plane,
            self.pages_per_block,
        ]
        .iter()
        .try_fold(self.channels as u64, |acc, &f| acc.checked_mul(f as u64));
        if total.is_none() {
            return Err(SimError::Config(
                "geometry total page count overflows u64".into(),
            ));
        }
        Ok(())
    }

    pub fn total_pages(&self) -> u64 {
        self.channels as u64
            * self.ways_per_channel as u64
            * self.planes_per_chip as u64
            * self.blocks_per_plane as u64
            * self.pages_per_block as u64
    }

    pub fn chips(&self) -> usize {
        (self.channels * self.ways_per_channel) as usize
    }

    /// Parallel units (chip x plane) visited by one allocation sweep.
    pub fn units(&self) -> u64 {
        self.channels as u64 * self.ways_per_channel as u64 * self.planes_per_chip as u64
    }

    pub fn total_blocks(&self) -> u64 {
        self.units() * self.blocks_per_plane as u64
    }

    /// Pages in one stripe: the same block index on every parallel unit.
    pub fn stripe_pages(&self) -> u64 {
        self.units() * self.pages_per_block as u64
    }

    pub fn chip_of(&self, addr: &PageAddr) -> ChipId {
        (addr.way * self.channels + addr.channel) as usize
    }

    pub fn chip_of_ppn(&self, ppn: Ppn) -> ChipId {
        // Block and page sit below plane in the PPN layout.
        let per_chip = self.planes_per_chip as u64
            * self.blocks_per_plane as u64
            * self.pages_per_block as u64;
        let chip_major = ppn.0 / per_chip;
        let channel = chip_major / self.ways_per_channel as u64;
        let way = chip_major % self.ways_per_channel as u64;
        (way * self.channels as u64 + channel) as usize
    }

    /// Flat block id: `ppn / pages_per_block`.
    pub fn block_of_ppn(&self, ppn: Ppn) -> u64 {
        ppn.0 / self.pages_per_block as u64
    }

    pub fn check_addr(&self, a: &PageAddr) -> Result<()> {
        if a.channel >= self.channels
            || a.way >= self.ways_per_channel
            || a.plane >= self.planes_per_chip
            || a.block >= self.blocks_per_plane
            || a.page >= self.pages_per_block
        {
            return Err(SimError::Address(format!(
                "{a:?} out of range for {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn compose_ppn(addr: &PageAddr, geom: &FlashGeometry) -> Result<Ppn> {
    geom.check_addr(addr)?;
    let g = geom;
    let v = (((addr.channel as u64 * g.ways_per_channel as u64 + addr.way as u64)
        * g.planes_per_chip as u64
        + addr.plane as u64)
        * g.blocks_per_plane as u64
        + addr.block as u64)
        * g.pages_per_block as u64
        + addr.page as u64;
    Ok(Ppn(v))
}

pub fn decompose_ppn(ppn: Ppn, geom: &FlashGeometry) -> Result<PageAddr> {
    if ppn.0 >= geom.total_pages() {
        return Err(SimError::Address(format!(
            "ppn {} >= {}",
            ppn.0,
            geom.total_pages()
        )));
    }
    let mut v = ppn.0;
    let page = (v % geom.pages_per_block as u64) as u32;
    v /= geom.pages_per_block as u64;
    let block = (v % geom.blocks_per_plane as u64) as u32;
    v /= geom.blocks_per_plane as u64;
    let plane = (v % geom.planes_per_chip as u64) as u32;
    v /= geom.planes_per_chip as u64;
    let way = (v % geom.ways_per_channel as u64) as u32;
    v /= geom.ways_per_channel as u64;
    let channel = v as u32;
    Ok(PageAddr {
        channel,
        way,
        plane,
        block,
        page,
    })
}

fn vppn_from_addr(a: &PageAddr, g: &FlashGeometry) -> Vppn {
    Vppn(
        (((a.block as u64 * g.pages_per_block as u64 + a.page as u64) * g.planes_per_chip as u64
            + a.plane as u64)
            * g.ways_per_channel as u64
            + a.way as u64)
            * g.channels as u64
            + a.channel as u64,
    )
}

fn addr_from_vppn(vppn: Vppn, g: &FlashGeometry) -> PageAddr {
    let mut v = vppn.0;
    let channel = (v % g.channels as u64) as u32;
    v /= g.channels as u64;
    let way = (v % g.ways_per_channel as u64) as u32;
    v /= g.ways_per_channel as u64;
    let plane = (v % g.planes_per_chip as u64) as u32;
    v /= g.planes_per_chip as u64;
    let page = (v % g.pages_per_block as u64) as u32;
    v /= g.pages_per_block as u64;
    let block = v as u32;
    PageAddr {
        channel,
        way,
        plane,
        block,
        page,
    }
}

pub fn ppn_to_vppn(ppn: Ppn, geom: &FlashGeometry) -> Result<Vppn> {
    let a = decompose_ppn(ppn, geom)?;
    Ok(vppn_from_addr(&a, geom))
}

pub fn vppn_to_ppn(vppn: Vppn, geom: &FlashGeometry) -> Result<Ppn> {
    if vppn.0 >= geom.total_pages() {
        return Err(SimError::Address(format!(
            "vppn {} >= {}",
            vppn.0,
            geom.total_pages()
        )));
    }
    compose_ppn(&addr_from_vppn(vppn, geom), geom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FlashGeometry {
        FlashGeometry::new(2, 2, 1, 2, 4, 4096).unwrap()
    }

    fn all_addrs(g: &FlashGeometry) -> Vec<PageAddr> {
        let mut out = Vec::new();
        for channel in 0..g.channels {
            for way in 0..g.ways_per_channel {
                for plane in 0..g.planes_per_chip {
                    for block in 0..g.blocks_per_plane {
                        for page in 0..g.pages_per_block {
                            out.push(PageAddr {
                                channel,
                                way,
                                plane,
                                block,
                                page,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn compose_hand_expanded() {
        let g = small();
        assert_eq!(compose_ppn(&PageAddr::default(), &g).unwrap(), Ppn(0));
        // channel stride = ways * planes * blocks * pages = 2*1*2*4
        let a = PageAddr {
            channel: 1,
            ..Default::default()
        };
        assert_eq!(compose_ppn(&a, &g).unwrap(), Ppn(16));
        let a = PageAddr {
            way: 1,
            ..Default::default()
        };
        assert_eq!(compose_ppn(&a, &g).unwrap(), Ppn(8));
    }

    #[test]
    fn decompose_edges() {
        let g = small();
        assert_eq!(decompose_ppn(Ppn(0), &g).unwrap(), PageAddr::default());
        let last = decompose_ppn(Ppn(g.total_pages() - 1), &g).unwrap();
        assert_eq!(
            last,
            PageAddr {
                channel: 1,
                way: 1,
                plane: 0,
                block: 1,
                page: 3
            }
        );
        assert!(decompose_ppn(Ppn(g.total_pages()), &g).is_err());
    }

    #[test]
    fn out_of_range_field_rejected() {
        let g = small();
        let a = PageAddr {
            page: 4,
            ..Default::default()
        };
        assert!(matches!(compose_ppn(&a, &g), Err(SimError::Address(_))));
        assert!(vppn_to_ppn(Vppn(32), &g).is_err());
    }

    #[test]
    fn exhaustive_small_bijection() {
        let g = small();
        let addrs = all_addrs(&g);
        assert_eq!(addrs.len(), 32);
        let mut seen_ppn = [false; 32];
        let mut seen_vppn = [false; 32];
        for a in &addrs {
            let p = compose_ppn(a, &g).unwrap();
            assert_eq!(decompose_ppn(p, &g).unwrap(), *a);
            seen_ppn[p.0 as usize] = true;
            let v = ppn_to_vppn(p, &g).unwrap();
            seen_vppn[v.0 as usize] = true;
            assert_eq!(vppn_to_ppn(v, &g).unwrap(), p);
        }
        assert!(seen_ppn.iter().all(|&s| s));
        assert!(seen_vppn.iter().all(|&s| s));
    }

    #[test]
    fn round_robin_sweep_is_consecutive() {
        // channel fastest, then way, then plane; block and page fixed.
        let g = small();
        for block in 0..g.blocks_per_plane {
            for page in 0..g.pages_per_block {
                let mut prev: Option<u64> = None;
                for plane in 0..g.planes_per_chip {
                    for way in 0..g.ways_per_channel {
                        for channel in 0..g.channels {
                            let a = PageAddr {
                                channel,
                                way,
                                plane,
                                block,
                                page,
                            };
                            let v = ppn_to_vppn(compose_ppn(&a, &g).unwrap(), &g).unwrap().0;
                            if let Some(p) = prev {
                                assert_eq!(v, p + 1);
                            }
                            prev = Some(v);
                        }
                    }
                }
            }
        }
        assert_eq!(ppn_to_vppn(Ppn(0), &g).unwrap(), Vppn(0));
    }

    #[test]
    fn chip_index_matches_addr() {
        let g = FlashGeometry::new(2, 4, 2, 3, 5, 512).unwrap();
        for p in 0..g.total_pages() {
            let a = decompose_ppn(Ppn(p), &g).unwrap();
            assert_eq!(g.chip_of(&a), g.chip_of_ppn(Ppn(p)));
        }
    }

    #[test]
    fn geometry_validation() {
        assert!(FlashGeometry::new(0, 1, 1, 1, 1, 4096).is_err());
        assert!(FlashGeometry::new(1, 1, 1, 1, 1, 3000).is_err());
        assert!(FlashGeometry::new(u32::MAX, u32::MAX, u32::MAX, 2, 2, 4096).is_err());
        assert_eq!(
            FlashGeometry::full_scale().total_pages(),
            8 * 8 * 256 * 512
        );
    }
}
