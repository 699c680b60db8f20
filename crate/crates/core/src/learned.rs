//! In-place-update piecewise linear model with a bitmap filter.
//!
//! Each GTD entry covers 512 consecutive LPNs and may carry a model that maps
//! an LPN offset to a VPPN offset from `base_vppn`. Piece parameters are
//! stored at half precision. The bitmap marks which offsets the stored
//! parameters reproduce exactly; a prediction is only ever used when its bit
//! is set, so the model can never send a read to the wrong page.

use half::f16;
use serde::Serialize;

use crate::error::{Result, SimError};
use crate::geometry::{vppn_to_ppn, FlashGeometry, Ppn, Vppn};

/// LPNs covered by one GTD entry / translation page.
pub const ENTRY_SPAN: usize = 512;

/// Budgeted DRAM per model: pieces, bitmap and base metadata.
pub const MODEL_BYTES: u64 = 128;

pub const DEFAULT_MAX_PIECES: usize = 8;
pub const DEFAULT_EPSILON: f64 = 0.5;

/// One linear piece, anchored at its own start offset:
/// `vppn_off = round(k * (lpn_off - off) + b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub k: f16,
    pub b: f16,
    pub off: u16,
}

impl Piece {
    pub fn eval(&self, lpn_off: u16) -> i64 {
        let dx = lpn_off as f64 - self.off as f64;
        (self.k.to_f64() * dx + self.b.to_f64()).round_ties_even() as i64
    }

    /// The same line re-anchored at `new_off`. May not reproduce every
    /// prediction exactly once `b` is re-quantized; callers compare.
    fn reanchored(&self, new_off: u16) -> Piece {
        let b = self.b.to_f64() + self.k.to_f64() * (new_off as f64 - self.off as f64);
        Piece {
            k: self.k,
            b: f16::from_f64(b),
            off: new_off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BitmapFilter {
    words: [u64; ENTRY_SPAN / 64],
}

impl BitmapFilter {
    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn clear(&mut self, i: usize) {
        self.words[i / 64] &= !(1 << (i % 64));
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Ones in `[lo, hi)`.
    pub fn count_range(&self, lo: usize, hi: usize) -> u32 {
        (lo..hi.min(ENTRY_SPAN)).filter(|&i| self.get(i)).count() as u32
    }

    pub fn clear_range(&mut self, lo: usize, hi: usize) {
        for i in lo..hi.min(ENTRY_SPAN) {
            self.clear(i);
        }
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..ENTRY_SPAN).filter(|&i| self.get(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrainingPair {
    pub lpn_off: u16,
    pub vppn_off: i64,
}

/// Piece array with strictly increasing `off`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    pieces: Vec<Piece>,
}

impl ModelParams {
    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Index of the piece with the greatest `off <= lpn_off`.
    pub fn covering(&self, lpn_off: u16) -> Option<usize> {
        match self.pieces.partition_point(|p| p.off <= lpn_off) {
            0 => None,
            n => Some(n - 1),
        }
    }

    pub fn predict_offset(&self, lpn_off: u16) -> Option<i64> {
        self.covering(lpn_off).map(|i| self.pieces[i].eval(lpn_off))
    }

    /// End (exclusive) of piece `i`'s range.
    fn piece_end(&self, i: usize) -> usize {
        self.pieces
            .get(i + 1)
            .map_or(ENTRY_SPAN, |p| p.off as usize)
    }

    /// 6 bytes per piece on the wire (k, b, off).
    pub fn serialized_len(&self) -> usize {
        self.pieces.len() * 6
    }

    fn check_sorted(&self) -> bool {
        self.pieces.windows(2).all(|w| w[0].off < w[1].off)
            && self.pieces.iter().all(|p| (p.off as usize) < ENTRY_SPAN)
    }
}

/// Model attached to one GTD entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearnedModel {
    pub params: ModelParams,
    pub bitmap: BitmapFilter,
    pub base_vppn: Option<Vppn>,
}

fn f16_next(q: f16, up: bool) -> f16 {
    let bits = q.to_bits();
    let positive = bits & 0x8000 == 0;
    let next = if q.to_f64() == 0.0 {
        if up {
            0x0001
        } else {
            0x8001
        }
    } else if positive == up {
        bits + 1
    } else {
        bits - 1
    };
    f16::from_bits(next)
}

/// Half-precision value inside `[lo, hi]` nearest to the cone midpoint, or the
/// plain quantized midpoint when no representable value fits.
fn quantize_slope(lo: f64, hi: f64) -> f16 {
    let mid = if lo.is_finite() && hi.is_finite() {
        (lo + hi) / 2.0
    } else {
        1.0
    };
    let q = f16::from_f64(mid);
    let v = q.to_f64();
    if v >= lo && v <= hi {
        return q;
    }
    let n = f16_next(q, v < lo);
    if n.to_f64() >= lo && n.to_f64() <= hi {
        n
    } else {
        q
    }
}

/// Greedy left-to-right segmentation under an error bound.
///
/// Each piece starts at a point and keeps a cone of slopes through that point
/// that fit every later point within `epsilon`; the first point that empties
/// the cone starts the next piece. Points left over once `max_pieces` pieces
/// exist are not fitted.
pub fn train_plr(pairs: &[TrainingPair], max_pieces: usize, epsilon: f64) -> ModelParams {
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < pairs.len() && pieces.len() < max_pieces {
        let first = pairs[i];
        let (x0, y0) = (first.lpn_off as f64, first.vppn_off as f64);
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut j = i + 1;
        while j < pairs.len() {
            let dx = pairs[j].lpn_off as f64 - x0;
            let dy = pairs[j].vppn_off as f64 - y0;
            let nlo = lo.max((dy - epsilon) / dx);
            let nhi = hi.min((dy + epsilon) / dx);
            if nlo > nhi {
                break;
            }
            lo = nlo;
            hi = nhi;
            j += 1;
        }
        pieces.push(Piece {
            k: quantize_slope(lo, hi),
            b: f16::from_f64(y0),
            off: first.lpn_off,
        });
        i = j;
    }
    ModelParams { pieces }
}

/// Bitmap with a bit set for every pair the stored parameters reproduce.
pub fn evaluate_and_set_bitmap(params: &ModelParams, pairs: &[TrainingPair]) -> BitmapFilter {
    let mut bm = BitmapFilter::default();
    for p in pairs {
        if params.predict_offset(p.lpn_off) == Some(p.vppn_off) {
            bm.set(p.lpn_off as usize);
        }
    }
    bm
}

impl LearnedModel {
    /// Train from scratch. `pairs` are sorted by LPN offset; `base_vppn` is the
    /// VPPN their offsets are measured from.
    pub fn trained(
        base_vppn: Vppn,
        pairs: &[TrainingPair],
        max_pieces: usize,
        epsilon: f64,
    ) -> Self {
        if pairs.is_empty() {
            return LearnedModel::default();
        }
        let params = train_plr(pairs, max_pieces, epsilon);
        let bitmap = evaluate_and_set_bitmap(&params, pairs);
        LearnedModel {
            params,
            bitmap,
            base_vppn: Some(base_vppn),
        }
    }

    pub fn accurate_lpns(&self) -> u32 {
        self.bitmap.count_ones()
    }

    /// Predicted physical page for `lpn_off`, or `None` when the filter says
    /// the model is not accurate there.
    pub fn predict(&self, lpn_off: u16, geom: &FlashGeometry) -> Result<Option<Ppn>> {
        if !self.bitmap.get(lpn_off as usize) {
            return Ok(None);
        }
        let off = self.params.predict_offset(lpn_off).ok_or_else(|| {
            SimError::Consistency(format!("bit {lpn_off} set but no covering piece"))
        })?;
        let base = self
            .base_vppn
            .ok_or_else(|| SimError::Consistency("model without base vppn".into()))?;
        let v = base.0 as i64 + off;
        if v < 0 || v as u64 >= geom.total_pages() {
            return Err(SimError::Consistency(format!(
                "predicted vppn {v} out of range"
            )));
        }
        vppn_to_ppn(Vppn(v as u64), geom).map(Some)
    }

    pub fn clear_bit(&mut self, lpn_off: u16) {
        self.bitmap.clear(lpn_off as usize);
    }

    /// Insert `new` covering `[new.off, end)`, truncating or splitting the
    /// pieces it overlaps. Bits are kept only where the prediction is provably
    /// unchanged; the caller sets bits for the new range.
    pub fn in_place_update(&mut self, new: Piece, end: usize, max_pieces: usize) {
        let s = new.off as usize;
        let e = end.min(ENTRY_SPAN);
        debug_assert!(s < e);
        let old = self.params.clone();
        let mut next: Vec<Piece> = Vec::with_capacity(old.pieces.len() + 2);
        let mut checks: Vec<(Piece, usize, usize)> = Vec::new();
        for (i, p) in old.pieces.iter().enumerate() {
            let (a, c) = (p.off as usize, old.piece_end(i));
            if c <= s || a >= e {
                next.push(*p);
                continue;
            }
            if a < s {
                next.push(*p);
            }
            if c > e {
                let cont = p.reanchored(e as u16);
                next.push(cont);
                checks.push((*p, e, c));
            }
        }
        next.push(new);
        next.sort_by_key(|p| p.off);
        // Bits inside the new range survive only where the new line agrees.
        for x in s..e {
            if self.bitmap.get(x) && old.predict_offset(x as u16) != Some(new.eval(x as u16)) {
                self.bitmap.clear(x);
            }
        }
        for (orig, lo, hi) in checks {
            let cont = orig.reanchored(lo as u16);
            for x in lo..hi {
                if self.bitmap.get(x) && cont.eval(x as u16) != orig.eval(x as u16) {
                    self.bitmap.clear(x);
                }
            }
        }
        self.params = ModelParams { pieces: next };
        while self.params.pieces.len() > max_pieces {
            let victim = (0..self.params.pieces.len())
                .filter(|&i| self.params.pieces[i].off as usize != s)
                .min_by_key(|&i| {
                    let lo = self.params.pieces[i].off as usize;
                    (self.bitmap.count_range(lo, self.params.piece_end(i)), lo)
                })
                .expect("more than one piece");
            let lo = self.params.pieces[victim].off as usize;
            let hi = self.params.piece_end(victim);
            self.bitmap.clear_range(lo, hi);
            self.params.pieces.remove(victim);
        }
        debug_assert!(self.params.check_sorted());
    }

    /// Fold a freshly written run of `len` LPNs starting at `start_off`, which
    /// received consecutive VPPNs from `first_vppn`, into the model as a
    /// slope-1 piece. Applies only when the model currently predicts fewer
    /// LPNs than the run would. Returns whether the model changed.
    pub fn sequential_init(
        &mut self,
        start_off: u16,
        first_vppn: Vppn,
        len: usize,
        max_pieces: usize,
    ) -> bool {
        let start = start_off as usize;
        let len = len.min(ENTRY_SPAN - start);
        if len == 0 || max_pieces == 0 {
            return false;
        }
        let old_len = self.bitmap.count_ones() as usize;
        if old_len >= len {
            return false;
        }
        let b = self
            .base_vppn
            .map(|base| first_vppn.0 as i64 - base.0 as i64);
        let b = match b {
            Some(b) if f16::from_f64(b as f64).to_f64() == b as f64 => b,
            _ => {
                // Unrepresentable intercept (or no model yet): start over with
                // this run as the only piece. Fewer than `len` LPNs are lost.
                *self = LearnedModel {
                    base_vppn: Some(first_vppn),
                    ..Default::default()
                };
                0
            }
        };
        let piece = Piece {
            k: f16::ONE,
            b: f16::from_f64(b as f64),
            off: start_off,
        };
        self.in_place_update(piece, start + len, max_pieces);
        for i in 0..len {
            let x = (start + i) as u16;
            if self.params.predict_offset(x) == Some(b + i as i64) {
                self.bitmap.set(start + i);
            }
        }
        true
    }

    pub fn summary(&self, entry: u32) -> ModelSummary {
        ModelSummary {
            entry,
            base_vppn: self.base_vppn.map(|v| v.0),
            popcount: self.bitmap.count_ones(),
            pieces: self
                .params
                .pieces
                .iter()
                .map(|p| PieceSummary {
                    k: p.k.to_f64(),
                    b: p.b.to_f64(),
                    off: p.off,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PieceSummary {
    pub k: f64,
    pub b: f64,
    pub off: u16,
}

/// Debug dump of one entry's model.
#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub entry: u32,
    pub base_vppn: Option<u64>,
    pub popcount: u32,
    pub pieces: Vec<PieceSummary>,
}
