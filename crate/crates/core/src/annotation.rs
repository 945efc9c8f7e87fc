//! Clicks, their distance-decay guidance encoding, and the sparse target
//! used for fine-tuning.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::LabelMap;
use crate::tensor::Tensor;

/// Guidance radius in pixels for full-size (512 px) tiles.
pub const DEFAULT_RADIUS: f64 = 25.0;

/// Guidance radius for the 64 px desk-scale scenes.
pub const DESK_RADIUS: f64 = 5.0;

/// Sparse-target entry for pixels nobody clicked.
pub const UNLABELED: u8 = u8::MAX;

/// A single user-labelled pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    pub order: u64,
}

impl Click {
    pub fn new(row: usize, col: usize, class_id: usize, order: u64) -> Self {
        Self {
            row,
            col,
            class_id,
            order,
        }
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.row >= height || self.col >= width {
            return Err(Error::OutOfBounds {
                row: self.row as i64,
                col: self.col as i64,
                height,
                width,
            });
        }
        Ok(())
    }
}

/// `H×W×N` guidance channels in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedAnnotations {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl EncodedAnnotations {
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn planar(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, class: usize) -> f64 {
        self.data[(class * self.height + row) * self.width + col]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.classes, self.height, self.width], self.data.clone())
            .expect("encoding dims are positive")
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::shape("crop", "window exceeds encoding"));
        }
        let mut data = Vec::with_capacity(height * width * self.classes);
        for n in 0..self.classes {
            for r in row..row + height {
                let start = (n * self.height + r) * self.width + col;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Self {
            height,
            width,
            classes: self.classes,
            data,
        })
    }
}

/// The neutral all-zeros guidance input.
pub fn zero_encoding(height: usize, width: usize, classes: usize) -> EncodedAnnotations {
    EncodedAnnotations {
        height,
        width,
        classes,
        data: vec![0.0; height * width * classes],
    }
}

/// Channel `n` at pixel `q` is the maximum over class-`n` clicks `k` of
/// `max(0, 1 − ‖q − k‖ / radius)`.
pub fn encode_clicks(
    clicks: &[Click],
    height: usize,
    width: usize,
    classes: usize,
    radius: f64,
) -> Result<EncodedAnnotations> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Invalid(format!("radius must be positive, got {radius}")));
    }
    let mut enc = zero_encoding(height, width, classes);
    let reach = radius.ceil() as usize;
    for click in clicks {
        click.check_bounds(height, width)?;
        if click.class_id >= classes {
            return Err(Error::ClassRange {
                class_id: click.class_id,
                num_classes: classes,
            });
        }
        let plane = &mut enc.data[click.class_id * height * width..(click.class_id + 1) * height * width];
        let r0 = click.row.saturating_sub(reach);
        let r1 = (click.row + reach + 1).min(height);
        let c0 = click.col.saturating_sub(reach);
        let c1 = (click.col + reach + 1).min(width);
        for r in r0..r1 {
            let dr = r as f64 - click.row as f64;
            for c in c0..c1 {
                let dc = c as f64 - click.col as f64;
                let v = 1.0 - (dr * dr + dc * dc).sqrt() / radius;
                let slot = &mut plane[r * width + c];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    Ok(enc)
}

/// Per-pixel class index, or [`UNLABELED`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseTarget {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SparseTarget {
    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![UNLABELED; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        match self.data[row * self.width + col] {
            UNLABELED => None,
            v => Some(v as usize),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != UNLABELED).count()
    }

    /// `(row, col, class)` for every labelled pixel, row-major.
    pub fn labeled(&self) -> Vec<(usize, usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != UNLABELED)
            .map(|(i, &v)| (i / self.width, i % self.width, v as usize))
            .collect()
    }

    /// Selection mask over a channel-major `[N, H, W]` map picking each
    /// labelled pixel's target class (the `c_i = 1` entries of the one-hot
    /// convention).
    pub fn target_mask(&self, classes: usize) -> Vec<bool> {
        let hw = self.height * self.width;
        let mut mask = vec![false; classes * hw];
        for (p, &v) in self.data.iter().enumerate() {
            if v != UNLABELED && (v as usize) < classes {
                mask[v as usize * hw + p] = true;
            }
        }
        mask
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::shape("crop", "window exceeds sparse target"));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in row..row + height {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + width]);
        }
        Ok(Self { height, width, data })
    }
}

/// Each clicked pixel takes the class of its highest-order click.
pub fn build_sparse_target(clicks: &[Click], height: usize, width: usize) -> Result<SparseTarget> {
    let mut latest: HashMap<(usize, usize), &Click> = HashMap::new();
    for click in clicks {
        click.check_bounds(height, width)?;
        if click.class_id >= UNLABELED as usize {
            return Err(Error::ClassRange {
                class_id: click.class_id,
                num_classes: UNLABELED as usize,
            });
        }
        latest
            .entry((click.row, click.col))
            .and_modify(|c| {
                if click.order >= c.order {
                    *c = click;
                }
            })
            .or_insert(click);
    }
    let mut target = SparseTarget::unlabeled(height, width);
    for ((r, c), click) in latest {
        target.data[r * width + c] = click.class_id as u8;
    }
    Ok(target)
}

/// Draws `k` distinct pixels uniformly and labels them from `gt`.
pub fn sample_random_clicks(gt: &LabelMap, k: usize, seed: u64) -> Result<Vec<Click>> {
    let n = gt.height() * gt.width();
    if k > n {
        return Err(Error::Invalid(format!("cannot draw {k} clicks from {n} pixels")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, n, k)
        .into_iter()
        .enumerate()
        .map(|(order, p)| {
            let (row, col) = (p / gt.width(), p % gt.width());
            Click::new(row, col, gt.get(row, col) as usize, order as u64)
        })
        .collect())
}
