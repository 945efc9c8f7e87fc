use serde::{Deserialize, Serialize};

use super::ProbMap;
use crate::error::{Error, Result};

/// Square tile size and overlap between neighbouring tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub size: usize,
    pub overlap: usize,
}

impl Default for TileSpec {
    /// Large-raster geometry: 512 px tiles overlapping by 128 px.
    fn default() -> Self {
        Self {
            size: 512,
            overlap: 128,
        }
    }
}

impl TileSpec {
    /// Desk-scale geometry matching the 64 px training patches.
    pub fn desk() -> Self {
        Self { size: 64, overlap: 16 }
    }

    pub fn new(size: usize, overlap: usize) -> Result<Self> {
        if size == 0 || overlap >= size {
            return Err(Error::Invalid(format!("tile overlap {overlap} must be below size {size}")));
        }
        Ok(Self { size, overlap })
    }

    pub fn stride(&self) -> usize {
        self.size - self.overlap
    }
}

/// Tile origins `(row, col)` in row-major order; every tile is `size × size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub size: usize,
    pub origins: Vec<(usize, usize)>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

fn axis_offsets(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut off = 0;
    loop {
        if off + size >= dim {
            out.push(dim - size);
            break;
        }
        out.push(off);
        off += stride;
    }
    out.sort_unstable();
    out.dedup();
    out
}

pub fn tile_grid(height: usize, width: usize, spec: TileSpec) -> Result<TileGrid> {
    if spec.overlap >= spec.size {
        return Err(Error::Invalid("tile overlap must be below tile size".into()));
    }
    if height < spec.size || width < spec.size {
        return Err(Error::Invalid(format!(
            "raster {height}x{width} is smaller than tile size {}",
            spec.size
        )));
    }
    let rows = axis_offsets(height, spec.size, spec.stride());
    let cols = axis_offsets(width, spec.size, spec.stride());
    let origins = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TileGrid {
        size: spec.size,
        origins,
    })
}

/// Averages overlapping tile predictions and renormalises each pixel.
pub fn stitch(tiles: &[((usize, usize), ProbMap)], height: usize, width: usize) -> Result<ProbMap> {
    let Some((_, first)) = tiles.first() else {
        return Err(Error::Invalid("no tiles to stitch".into()));
    };
    let n = first.classes();
    let hw = height * width;
    let mut acc = vec![0.0; n * hw];
    let mut count = vec![0u32; hw];
    for &((r0, c0), ref tile) in tiles {
        if tile.classes() != n {
            return Err(Error::shape("stitch", "tiles disagree on class count"));
        }
        if r0 + tile.height() > height || c0 + tile.width() > width {
            return Err(Error::shape("stitch", format!("tile at ({r0}, {c0}) exceeds raster")));
        }
        for r in 0..tile.height() {
            for c in 0..tile.width() {
                let p = (r0 + r) * width + c0 + c;
                count[p] += 1;
                for k in 0..n {
                    acc[k * hw + p] += tile.get(r, c, k);
                }
            }
        }
    }
    for p in 0..hw {
        if count[p] == 0 {
            return Err(Error::Invalid(format!("pixel ({}, {}) not covered by any tile", p / width, p % width)));
        }
        let total: f64 = (0..n).map(|k| acc[k * hw + p]).sum();
        for k in 0..n {
            acc[k * hw + p] /= total;
        }
    }
    ProbMap::from_planar(height, width, n, acc)
}
