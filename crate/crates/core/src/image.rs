use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};

/// What the samples of an [`ImageBuffer`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    /// Linear radiance in [0, 1].
    Radiance,
    /// Expected ray parameter, world units.
    Depth,
    /// Attenuation line integral, dimensionless.
    LineIntegral,
    /// Surviving fraction of light (renderer transmittance, DRR intensity).
    Transmittance,
}

/// Row-major `height x width x channels` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub kind: ImageKind,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, kind: ImageKind) -> Self {
        Self::filled(width, height, channels, kind, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, kind: ImageKind, value: f64) -> Self {
        Self { width, height, channels, kind, data: vec![value; width * height * channels] }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        kind: ImageKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(argument(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(argument(format!(
                "image data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if kind == ImageKind::Radiance && data.iter().any(|v| !v.is_finite()) {
            return Err(argument("radiance image contains non-finite values"));
        }
        Ok(Self { width, height, channels, kind, data })
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Extracts channel `ch` as a single-channel image.
    pub fn channel(&self, ch: usize) -> ImageBuffer {
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        ImageBuffer { width: self.width, height: self.height, channels: 1, kind: self.kind, data }
    }

    /// Copies a `h x w` window starting at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> ImageBuffer {
        let mut out = ImageBuffer::new(w, h, self.channels, self.kind);
        for r in 0..h {
            let src = self.index(row + r, col, 0);
            let dst = out.index(r, 0, 0);
            out.data[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        out
    }

    /// Swaps rows and columns.
    pub fn transposed(&self) -> ImageBuffer {
        let mut out = ImageBuffer::new(self.height, self.width, self.channels, self.kind);
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..self.channels {
                    out.set(c, r, ch, self.get(r, c, ch));
                }
            }
        }
        out
    }
}
