//! The image currency shared by every module: an `H x W x 3` array of
//! intensities in `[0, 1]` with an optional field-of-view mask.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{param_err, Result};

pub const CHANNELS: usize = 3;
pub const MIN_SIDE: usize = 16;

/// A boolean `H x W` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(param_err!(
                "mask buffer has {} entries, expected {}x{}",
                data.len(),
                height,
                width
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// `H x W x 3` intensities in `[0, 1]`, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FundusImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    fov_mask: Option<Mask>,
}

impl FundusImage {
    /// Validates the buffer: finite values in `[0, 1]`, both sides at least 16.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(param_err!(
                "image is {height}x{width}, both sides must be at least {MIN_SIDE}"
            ));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(param_err!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                height * width * CHANNELS
            ));
        }
        if let Some(bad) = pixels
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(param_err!(
                "pixel value {} at index {bad} is outside [0, 1]",
                pixels[bad]
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
            fov_mask: None,
        })
    }

    /// Clamps every value into `[0, 1]` (NaN maps to 0) before validating.
    pub fn from_clipped(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|&v| clip01(v) as f32).collect();
        Self::new(height, width, pixels)
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..CHANNELS {
                    pixels.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn with_mask(mut self, mask: Option<Mask>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.height != self.height || m.width != self.width {
                return Err(param_err!(
                    "fov mask is {}x{}, image is {}x{}",
                    m.height,
                    m.width,
                    self.height,
                    self.width
                ));
            }
        }
        self.fov_mask = mask;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The image size `w` used by the degradation ranges: the shorter side.
    pub fn size(&self) -> usize {
        self.height.min(self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn fov_mask(&self) -> Option<&Mask> {
        self.fov_mask.as_ref()
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * CHANNELS + ch]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixels widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| f64::from(v)).collect()
    }

    /// Rebuilds an image of the same shape from working values, clipping to
    /// `[0, 1]` and keeping the fov mask.
    pub fn replaced(&self, values: &[f64]) -> Self {
        debug_assert_eq!(values.len(), self.pixels.len());
        Self {
            height: self.height,
            width: self.width,
            pixels: values.iter().map(|&v| clip01(v) as f32).collect(),
            fov_mask: self.fov_mask.clone(),
        }
    }

    /// Channel-planar copy (`3 x H x W`), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n * CHANNELS];
        for (i, px) in self.pixels.chunks_exact(CHANNELS).enumerate() {
            for ch in 0..CHANNELS {
                out[ch * n + i] = px[ch];
            }
        }
        out
    }

    /// Inverse of [`to_planar`](Self::to_planar); values are clipped to `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, planar: &[f32]) -> Result<Self> {
        let n = height * width;
        if planar.len() != n * CHANNELS {
            return Err(param_err!("planar buffer has wrong length {}", planar.len()));
        }
        let mut pixels = vec![0.0f32; n * CHANNELS];
        for ch in 0..CHANNELS {
            for i in 0..n {
                let v = planar[ch * n + i];
                pixels[i * CHANNELS + ch] = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            }
        }
        Self::new(height, width, pixels)
    }
}

pub fn clip01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}
