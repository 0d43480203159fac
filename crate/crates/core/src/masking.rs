//! Inverse block masking over the final-level patch grid.
//!
//! `true` marks a masked patch. Features are multiplied by `1 - mask`.

use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major boolean grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BoolGrid {
    h: usize,
    w: usize,
    cells: Vec<bool>,
}

impl BoolGrid {
    pub fn new(h: usize, w: usize, cells: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::dim("grid", format!("empty {h}x{w} grid")));
        }
        if cells.len() != h * w {
            return Err(Error::dim(
                "grid",
                format!("{h}x{w} grid needs {} cells, got {}", h * w, cells.len()),
            ));
        }
        Ok(Self { h, w, cells })
    }

    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        Self {
            h,
            w,
            cells: vec![value; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.w + j]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// `1 - cell` as reals, repeated over `channels` leading planes.
    pub fn keep_factors(&self, channels: usize) -> Vec<f64> {
        let plane: Vec<f64> = self
            .cells
            .iter()
            .map(|&m| if m { 0.0 } else { 1.0 })
            .collect();
        let mut out = Vec::with_capacity(channels * plane.len());
        for _ in 0..channels {
            out.extend_from_slice(&plane);
        }
        out
    }
}

/// How block windows are placed on the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockPlacement {
    /// Top-left corner uniform over positions where the whole window fits.
    #[default]
    Valid,
    /// Top-left corner uniform over every cell, window wrapping around both axes.
    Torus,
}

impl BlockPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Valid => "valid",
            Self::Torus => "torus",
        }
    }
}

impl std::str::FromStr for BlockPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Self::Valid),
            "torus" => Ok(Self::Torus),
            _ => Err(Error::InvalidArgument(format!(
                "unknown block placement {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub block: usize,
    pub placement: BlockPlacement,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            block: 4,
            placement: BlockPlacement::Valid,
        }
    }
}

/// Masked patches of one clone, over the final-resolution grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    grid: BoolGrid,
    target_ratio: f64,
    block_size: usize,
}

impl PatchMask {
    /// Wraps an explicit grid (no count invariant is imposed).
    pub fn from_grid(grid: BoolGrid, block_size: usize) -> Self {
        let target_ratio = grid.count() as f64 / grid.cells.len() as f64;
        Self {
            grid,
            target_ratio,
            block_size,
        }
    }

    /// Nothing masked.
    pub fn none(h: usize, w: usize) -> Self {
        Self::from_grid(BoolGrid::filled(h, w, false), 1)
    }

    pub fn grid(&self) -> &BoolGrid {
        &self.grid
    }

    pub fn target_ratio(&self) -> f64 {
        self.target_ratio
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid.cells.len()
    }

    pub fn masked_count(&self) -> usize {
        self.grid.count()
    }

    /// Flattened indices of unmasked patches, ascending.
    pub fn kept_positions(&self) -> Vec<usize> {
        (0..self.grid.cells.len())
            .filter(|&i| !self.grid.cells[i])
            .collect()
    }

    /// Flattened indices of masked patches, ascending.
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.grid.cells.len())
            .filter(|&i| self.grid.cells[i])
            .collect()
    }
}

/// Starts fully masked, unmasks random block windows while a whole block
/// still fits under the target, then unmasks random single patches until the
/// masked count is exactly `round(ratio * P)`.
pub fn inverse_block_mask<R: Rng + ?Sized>(
    rng: &mut R,
    grid_h: usize,
    grid_w: usize,
    spec: &MaskSpec,
) -> Result<PatchMask> {
    let MaskSpec {
        ratio,
        block,
        placement,
    } = *spec;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} is outside (0, 1)"
        )));
    }
    if block == 0 || block > grid_h.min(grid_w) {
        return Err(Error::dim(
            "block",
            format!("block {block} does not fit a {grid_h}x{grid_w} grid"),
        ));
    }
    let total = grid_h * grid_w;
    let target = (ratio * total as f64).round() as usize;
    if target == 0 || target == total {
        return Err(Error::DegenerateMask {
            masked: target,
            total,
        });
    }
    let keep = total - target;
    let mut cells = vec![true; total];
    let mut unmasked = 0usize;
    let area = block * block;
    while unmasked + area <= keep {
        let (top, left) = match placement {
            BlockPlacement::Valid => (
                rng.gen_range(0..=grid_h - block),
                rng.gen_range(0..=grid_w - block),
            ),
            BlockPlacement::Torus => (rng.gen_range(0..grid_h), rng.gen_range(0..grid_w)),
        };
        for di in 0..block {
            for dj in 0..block {
                let i = (top + di) % grid_h;
                let j = (left + dj) % grid_w;
                let cell = &mut cells[i * grid_w + j];
                if *cell {
                    *cell = false;
                    unmasked += 1;
                }
            }
        }
    }
    let mut still: Vec<usize> = (0..total).filter(|&i| cells[i]).collect();
    while unmasked < keep {
        let pick = still.swap_remove(rng.gen_range(0..still.len()));
        cells[pick] = false;
        unmasked += 1;
    }
    Ok(PatchMask {
        grid: BoolGrid {
            h: grid_h,
            w: grid_w,
            cells,
        },
        target_ratio: ratio,
        block_size: block,
    })
}

/// Nearest-neighbour upsampling of a mask grid to `level_h x level_w`.
pub fn interpolate_mask(grid: &BoolGrid, level_h: usize, level_w: usize) -> Result<BoolGrid> {
    if level_h == 0 || level_h % grid.h != 0 {
        return Err(Error::dim(
            "height",
            format!(
                "level height {level_h} is not a multiple of mask height {}",
                grid.h
            ),
        ));
    }
    if level_w == 0 || level_w % grid.w != 0 {
        return Err(Error::dim(
            "width",
            format!(
                "level width {level_w} is not a multiple of mask width {}",
                grid.w
            ),
        ));
    }
    let (sh, sw) = (level_h / grid.h, level_w / grid.w);
    let cells = (0..level_h * level_w)
        .map(|idx| grid.get(idx / level_w / sh, idx % level_w / sw))
        .collect();
    Ok(BoolGrid {
        h: level_h,
        w: level_w,
        cells,
    })
}

/// Independent masks for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct CloneBatch {
    pub clip_id: String,
    pub masks: Vec<PatchMask>,
}

/// Redraws per clone before a duplicate is accepted (only tiny grids get there).
const MAX_REDRAWS: usize = 256;

/// `n_clones` masks, redrawn on collision so they are pairwise distinct.
pub fn clone_masks<R: Rng + ?Sized>(
    rng: &mut R,
    clip_id: &str,
    grid_h: usize,
    grid_w: usize,
    spec: &MaskSpec,
    n_clones: usize,
) -> Result<CloneBatch> {
    if n_clones == 0 {
        return Err(Error::InvalidArgument(
            "clone count must be at least 1".into(),
        ));
    }
    let mut masks: Vec<PatchMask> = Vec::with_capacity(n_clones);
    for _ in 0..n_clones {
        let mut m = inverse_block_mask(rng, grid_h, grid_w, spec)?;
        for _ in 0..MAX_REDRAWS {
            if !masks.iter().any(|o| o.grid == m.grid) {
                break;
            }
            m = inverse_block_mask(rng, grid_h, grid_w, spec)?;
        }
        masks.push(m);
    }
    Ok(CloneBatch {
        clip_id: clip_id.to_string(),
        masks,
    })
}
