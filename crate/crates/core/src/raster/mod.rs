//! Image, label and probability rasters, their file formats, and the
//! overlapping tile grid used for large images.

mod pnm;
mod tiles;

pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm};
pub use pnm::{decode_prob, encode_prob, read_prob, write_prob};
pub use tiles::{stitch, tile_grid, TileGrid, TileSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `H×W×C` raster of reals in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds an image from channel-major planes.
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn planar(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(ch * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(ch * self.height + row) * self.width + col] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("image dims are positive")
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::shape("crop", "window exceeds image"));
        }
        let mut out = Self::zeros(height, width, self.channels);
        for ch in 0..self.channels {
            for r in 0..height {
                for c in 0..width {
                    out.set(r, c, ch, self.get(row + r, col + c, ch));
                }
            }
        }
        Ok(out)
    }
}

/// `H×W` class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape("label map", format!("{height}x{width} vs {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Fails when any label is not below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= num_classes) {
            Some(&v) => Err(Error::ClassRange {
                class_id: v as usize,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::shape("crop", "window exceeds label map"));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in row..row + height {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + width]);
        }
        Self::new(height, width, data)
    }
}

/// An image with its dense ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub labels: LabelMap,
}

/// Per-pixel class distribution, `H×W×N`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

/// Tolerance on per-pixel probability sums.
pub const PROB_SUM_TOL: f64 = 1e-9;

impl ProbMap {
    /// Wraps a `[N, H, W]` tensor, checking normalisation.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, h, w) = t.chw("prob map")?;
        Self::from_planar(h, w, n, t.data().to_vec())
    }

    pub fn from_planar(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 || data.len() != height * width * classes {
            return Err(Error::shape("prob map", "dimension mismatch"));
        }
        let map = Self {
            height,
            width,
            classes,
            data,
        };
        map.check_normalized()?;
        Ok(map)
    }

    fn check_normalized(&self) -> Result<()> {
        let hw = self.height * self.width;
        for p in 0..hw {
            let mut sum = 0.0;
            for n in 0..self.classes {
                let v = self.data[n * hw + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Invalid(format!("probability {v} outside [0, 1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Invalid(format!("pixel {p} sums to {sum}")));
            }
        }
        Ok(())
    }

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
            .expect("prob map dims are positive")
    }

    /// Most probable class per pixel; ties go to the lower class index.
    pub fn argmax(&self) -> LabelMap {
        let hw = self.height * self.width;
        let data = (0..hw)
            .map(|p| {
                let mut best = 0;
                for n in 1..self.classes {
                    if self.data[n * hw + p] > self.data[best * hw + p] {
                        best = n;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Sum of absolute entrywise differences.
    pub fn l1_distance(&self, other: &ProbMap) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn bit_eq(&self, other: &ProbMap) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.classes == other.classes
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::shape("crop", "window exceeds prob map"));
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
