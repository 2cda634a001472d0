//! Block-wise masking.
//!
//! A random mask is drawn on the coarsest (stage-3) token grid and upsampled
//! by 2 and 4 to the stage-2 and stage-1 grids, so every masked stage-3 token
//! owns a fully masked 2x2 block at stage 2 and 4x4 block at stage 1.
//!
//! # Sampling algorithm
//!
//! For a `grid_h x grid_w` grid with `n = grid_h * grid_w` tokens:
//!
//! 1. `visible = round_ties_even(keep_ratio * n)`.
//! 2. Shuffle `[0, 1, .., n-1]` with [`CounterRng::shuffle`] seeded by `seed`.
//! 3. The first `visible` shuffled indices, sorted ascending, are visible;
//!    all others are masked.
//!
//! In a batch, sample `i` uses seed `seed + i` (wrapping).

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::SpatialMask;

/// Binary grid, row-major; `true` marks a masked cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<bool>,
}

impl MaskGrid {
    pub fn new(h: usize, w: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != h * w {
            return Err(Error::Shape(format!("{}x{} grid with {} cells", h, w, cells.len())));
        }
        Ok(Self { h, w, cells })
    }

    pub fn filled(h: usize, w: usize, masked: bool) -> Self {
        Self { h, w, cells: vec![masked; h * w] }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.w + col]
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Nearest-neighbour upsampling: each cell becomes a `factor x factor` block.
pub fn upsample_mask(grid: &MaskGrid, factor: usize) -> Result<MaskGrid> {
    if factor == 0 {
        return Err(Error::Config("mask upsampling factor must be positive".into()));
    }
    let (h, w) = (grid.h * factor, grid.w * factor);
    let cells = (0..h * w).map(|i| grid.get(i / w / factor, i % w / factor)).collect();
    Ok(MaskGrid { h, w, cells })
}

/// Aligned masks for the three encoder stages.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub grid3: MaskGrid,
    pub grid2: MaskGrid,
    pub grid1: MaskGrid,
    /// Flat stage-3 indices of visible tokens, strictly increasing.
    pub visible3: Vec<usize>,
    pub keep_ratio: f64,
    pub seed: u64,
}

pub fn visible_count(tokens: usize, keep_ratio: f64) -> usize {
    (keep_ratio * tokens as f64).round_ties_even() as usize
}

pub fn generate_block_mask(grid_h: usize, grid_w: usize, keep_ratio: f64, seed: u64) -> Result<MaskSet> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!("keep ratio must lie in (0, 1], got {}", keep_ratio)));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::Config(format!("mask grid must be non-empty, got {}x{}", grid_h, grid_w)));
    }
    let n = grid_h * grid_w;
    let keep = visible_count(n, keep_ratio);
    let mut order: Vec<usize> = (0..n).collect();
    CounterRng::new(seed).shuffle(&mut order);
    let mut visible3 = order[..keep].to_vec();
    visible3.sort_unstable();
    let mut cells = vec![true; n];
    for &i in &visible3 {
        cells[i] = false;
    }
    let grid3 = MaskGrid { h: grid_h, w: grid_w, cells };
    Ok(MaskSet {
        grid2: upsample_mask(&grid3, 2)?,
        grid1: upsample_mask(&grid3, 4)?,
        grid3,
        visible3,
        keep_ratio,
        seed,
    })
}

/// True iff every stride window of each stage transition covers cells of a
/// single mask value that equals the coarser grid's cell. `strides` are the
/// patch-embed, stage-1→2 and stage-2→3 strides. Pixels carry no mask of
/// their own, so the patch-embed stride only has to be positive.
pub fn alignment_check(mask: &MaskSet, strides: [usize; 3]) -> bool {
    if strides.contains(&0) {
        return false;
    }
    let pairs = [(&mask.grid1, &mask.grid2, strides[1]), (&mask.grid2, &mask.grid3, strides[2])];
    pairs.iter().all(|(fine, coarse, s)| {
        if fine.h != coarse.h * s || fine.w != coarse.w * s {
            return false;
        }
        (0..fine.h).all(|r| (0..fine.w).all(|c| fine.get(r, c) == coarse.get(r / s, c / s)))
    })
}

impl MaskSet {
    /// Everything visible; used for unmasked (fine-tuning style) forwards.
    pub fn all_visible(grid_h: usize, grid_w: usize) -> Self {
        generate_block_mask(grid_h, grid_w, 1.0, 0).expect("keep ratio 1 is valid")
    }

    pub fn tokens(&self) -> usize {
        self.grid3.h * self.grid3.w
    }

    /// Flat stage-3 indices of masked tokens, increasing.
    pub fn masked3(&self) -> Vec<usize> {
        (0..self.tokens()).filter(|&i| self.grid3.cells[i]).collect()
    }

    /// Checks block structure, visible-list consistency and count exactness.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Invariant(m.to_string()));
        if self.grid2 != upsample_mask(&self.grid3, 2)? || self.grid1 != upsample_mask(&self.grid3, 4)? {
            return fail("stage-1/2 masks are not block upsamplings of the stage-3 mask");
        }
        if self.visible3.windows(2).any(|w| w[0] >= w[1]) {
            return fail("visible index list is not strictly increasing");
        }
        let from_grid: Vec<usize> = (0..self.tokens()).filter(|&i| !self.grid3.cells[i]).collect();
        if from_grid != self.visible3 {
            return fail("visible index list disagrees with the stage-3 grid");
        }
        if self.visible3.len() != visible_count(self.tokens(), self.keep_ratio) {
            return fail("visible token count differs from round(keep_ratio * tokens)");
        }
        Ok(())
    }

    /// Serializes as a little-endian header followed by packed stage-3 rows.
    ///
    /// ```text
    /// magic    8 bytes  "CMAEMASK"
    /// grid_h   u32
    /// grid_w   u32
    /// keep     f64
    /// seed     u64
    /// rows     grid_h * ceil(grid_w / 8) bytes; cell c of a row is bit (c % 8)
    ///          of byte c / 8, least significant bit first; 1 = masked
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&(self.grid3.h as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid3.w as u32).to_le_bytes());
        out.extend_from_slice(&self.keep_ratio.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let row_bytes = self.grid3.w.div_ceil(8);
        for r in 0..self.grid3.h {
            let mut row = vec![0u8; row_bytes];
            for c in 0..self.grid3.w {
                if self.grid3.get(r, c) {
                    row[c / 8] |= 1 << (c % 8);
                }
            }
            out.extend_from_slice(&row);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 8 + 4 + 4 + 8 + 8;
        if bytes.len() < HEADER || &bytes[..8] != MASK_MAGIC {
            return Err(Error::Format("not a mask file".into()));
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let keep_ratio = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let seed = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let row_bytes = w.div_ceil(8);
        if bytes.len() != HEADER + h * row_bytes {
            return Err(Error::Format(format!(
                "mask payload of {} bytes for a {}x{} grid",
                bytes.len() - HEADER,
                h,
                w
            )));
        }
        let mut cells = Vec::with_capacity(h * w);
        for r in 0..h {
            let row = &bytes[HEADER + r * row_bytes..HEADER + (r + 1) * row_bytes];
            cells.extend((0..w).map(|c| row[c / 8] >> (c % 8) & 1 == 1));
        }
        let grid3 = MaskGrid { h, w, cells };
        let visible3 = (0..h * w).filter(|&i| !grid3.cells[i]).collect();
        let set = MaskSet {
            grid2: upsample_mask(&grid3, 2)?,
            grid1: upsample_mask(&grid3, 4)?,
            grid3,
            visible3,
            keep_ratio,
            seed,
        };
        set.validate()?;
        Ok(set)
    }
}

const MASK_MAGIC: &[u8; 8] = b"CMAEMASK";

/// One [`MaskSet`] per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMask {
    pub masks: Vec<MaskSet>,
}

impl BatchMask {
    /// Sample `i` gets seed `seed + i`.
    pub fn generate(batch: usize, grid_h: usize, grid_w: usize, keep_ratio: f64, seed: u64) -> Result<Self> {
        let masks = (0..batch)
            .map(|i| generate_block_mask(grid_h, grid_w, keep_ratio, seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self { masks })
    }

    pub fn all_visible(batch: usize, grid_h: usize, grid_w: usize) -> Self {
        Self { masks: vec![MaskSet::all_visible(grid_h, grid_w); batch] }
    }

    pub fn from_masks(masks: Vec<MaskSet>) -> Result<Self> {
        if let Some(first) = masks.first() {
            let same = masks.iter().all(|m| {
                m.grid3.h == first.grid3.h && m.grid3.w == first.grid3.w && m.visible3.len() == first.visible3.len()
            });
            if !same {
                return Err(Error::Shape("batch masks must share grid size and visible count".into()));
            }
        }
        Ok(Self { masks })
    }

    pub fn batch(&self) -> usize {
        self.masks.len()
    }

    pub fn grid3(&self) -> (usize, usize) {
        self.masks.first().map_or((0, 0), |m| (m.grid3.h, m.grid3.w))
    }

    pub fn visible_per_sample(&self) -> usize {
        self.masks.first().map_or(0, |m| m.visible3.len())
    }

    pub fn visible_indices(&self) -> Vec<Vec<usize>> {
        self.masks.iter().map(|m| m.visible3.clone()).collect()
    }

    pub fn masked_indices(&self) -> Vec<Vec<usize>> {
        self.masks.iter().map(|m| m.masked3()).collect()
    }

    /// Spatial visibility for encoder stage `stage` (1, 2 or 3).
    pub fn spatial(&self, stage: usize) -> SpatialMask {
        fn pick(m: &MaskSet, stage: usize) -> &MaskGrid {
            match stage {
                1 => &m.grid1,
                2 => &m.grid2,
                _ => &m.grid3,
            }
        }
        let first = pick(&self.masks[0], stage);
        let (h, w) = (first.h, first.w);
        let visible = self.masks.iter().flat_map(|m| pick(m, stage).cells.iter().map(|&c| !c)).collect();
        SpatialMask { batch: self.masks.len(), h, w, visible }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_keeps_49_tokens() {
        let m = generate_block_mask(14, 14, 0.25, 7).unwrap();
        assert_eq!(m.visible3.len(), 49);
        assert_eq!(m.grid3.masked_count(), 147);
        m.validate().unwrap();
    }

    #[test]
    fn full_keep_masks_nothing() {
        let m = generate_block_mask(4, 4, 1.0, 123).unwrap();
        assert_eq!(m.visible3, (0..16).collect::<Vec<_>>());
        assert_eq!(m.grid1.masked_count() + m.grid2.masked_count() + m.grid3.masked_count(), 0);
    }

    #[test]
    fn rejects_bad_keep_ratio() {
        for r in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(generate_block_mask(4, 4, r, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn ties_round_to_even() {
        // 0.1 * 5 = 0.5 rounds to 0, 0.5 * 3 = 1.5 rounds to 2.
        assert_eq!(visible_count(5, 0.1), 0);
        assert_eq!(visible_count(3, 0.5), 2);
        assert_eq!(visible_count(196, 0.25), 49);
    }

    #[test]
    fn upsample_single_cell() {
        let g = MaskGrid::new(1, 1, vec![true]).unwrap();
        assert_eq!(upsample_mask(&g, 2).unwrap(), MaskGrid::filled(2, 2, true));
        assert!(upsample_mask(&g, 0).is_err());
    }

    #[test]
    fn upsample_checkerboard() {
        let g = MaskGrid::new(2, 2, vec![true, false, false, true]).unwrap();
        let up = upsample_mask(&g, 2).unwrap();
        let expected = [
            1, 1, 0, 0, //
            1, 1, 0, 0, //
            0, 0, 1, 1, //
            0, 0, 1, 1,
        ];
        assert_eq!(up.cells, expected.iter().map(|&v| v == 1).collect::<Vec<_>>());
    }

    #[test]
    fn flipped_cell_breaks_alignment() {
        let mut m = generate_block_mask(4, 4, 0.5, 3).unwrap();
        assert!(alignment_check(&m, [4, 2, 2]));
        m.grid1.cells[5] = !m.grid1.cells[5];
        assert!(!alignment_check(&m, [4, 2, 2]));
    }

    #[test]
    fn serialization_round_trip() {
        let m = generate_block_mask(5, 11, 0.25, 99).unwrap();
        let back = MaskSet::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let mut corrupt = m.to_bytes();
        corrupt.pop();
        assert!(MaskSet::from_bytes(&corrupt).is_err());
    }

    #[test]
    fn batch_uses_consecutive_seeds() {
        let b = BatchMask::generate(3, 6, 6, 0.25, 10).unwrap();
        for (i, m) in b.masks.iter().enumerate() {
            assert_eq!(*m, generate_block_mask(6, 6, 0.25, 10 + i as u64).unwrap());
        }
        let s = b.spatial(1);
        assert_eq!((s.batch, s.h, s.w), (3, 24, 24));
    }
}
