//! Image containers and rectangle algebra.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, invalid, Error, Result};
use crate::math;

/// Shape of a planar (channel-major) field: `data[c][y][x]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// A flat vector of `n` scalars.
    pub const fn flat(n: usize) -> Self {
        Self::new(1, 1, n)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn with_channels(&self, channels: usize) -> Self {
        Self::new(channels, self.height, self.width)
    }
}

/// Row-major interleaved image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("image needs at least one channel"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(channels))
            .ok_or_else(|| invalid("image dimensions overflow"))?;
        check_len(n, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Build from 8-bit samples; `v / 255`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Quantize to 8 bits, rounding half away from zero after clamping.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| math::round(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    /// Planar copy from channel-major data.
    pub fn from_planar(dims: Dims, planar: &[f64]) -> Result<Self> {
        check_len(dims.len(), planar.len())?;
        let plane = dims.plane();
        let mut data = vec![0.0; planar.len()];
        for c in 0..dims.channels {
            for p in 0..plane {
                data[p * dims.channels + c] = planar[c * plane + p];
            }
        }
        Self::from_vec(dims.height, dims.width, dims.channels, data)
    }

    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..plane {
            for c in 0..self.channels {
                out[c * plane + p] = self.data[p * self.channels + c];
            }
        }
        out
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

    pub fn dims(&self) -> Dims {
        Dims::new(self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn clamped(mut self) -> Self {
        self.clamp_unit();
        self
    }

    fn check_rect(&self, origin: (usize, usize), size: (usize, usize)) -> Result<()> {
        let (r, c) = origin;
        let (h, w) = size;
        let fits = r.checked_add(h).is_some_and(|e| e <= self.height)
            && c.checked_add(w).is_some_and(|e| e <= self.width);
        if fits {
            Ok(())
        } else {
            Err(Error::OutOfBounds)
        }
    }
}

/// A rectangular copy of part of a parent image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `(row, col)` of the top-left pixel in the parent.
    pub origin: (usize, usize),
    pub data: ImageBuffer,
}

impl Patch {
    /// `(height, width)` in pixels.
    pub fn size(&self) -> (usize, usize) {
        (self.data.height, self.data.width)
    }
}

/// Copy the `size = (height, width)` rectangle at `origin` out of `img`.
pub fn extract_patch(img: &ImageBuffer, origin: (usize, usize), size: (usize, usize)) -> Result<Patch> {
    img.check_rect(origin, size)?;
    let (r0, c0) = origin;
    let (h, w) = size;
    let ch = img.channels;
    let mut data = Vec::with_capacity(h * w * ch);
    for r in r0..r0 + h {
        let start = (r * img.width + c0) * ch;
        data.extend_from_slice(&img.data[start..start + w * ch]);
    }
    Ok(Patch {
        origin,
        data: ImageBuffer {
            height: h,
            width: w,
            channels: ch,
            data,
        },
    })
}

/// Write `patch` back into `img` at its origin. Touches only that rectangle.
pub fn paste_patch(img: &mut ImageBuffer, patch: &Patch) -> Result<()> {
    if patch.data.channels != img.channels {
        return Err(Error::ShapeMismatch {
            expected: img.channels,
            got: patch.data.channels,
        });
    }
    img.check_rect(patch.origin, patch.size())?;
    let (r0, c0) = patch.origin;
    let (h, w) = patch.size();
    let ch = img.channels;
    for r in 0..h {
        let dst = ((r0 + r) * img.width + c0) * ch;
        let src = r * w * ch;
        img.data[dst..dst + w * ch].copy_from_slice(&patch.data.data[src..src + w * ch]);
    }
    Ok(())
}
