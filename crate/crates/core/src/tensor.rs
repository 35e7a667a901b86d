//! Dense row-major image planes shared by the renderer, the losses and the
//! scene generator.

use crate::error::{Error, Result};

/// `height × width × channels` grid of reals, row-major with interleaved
/// channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// 2×2 box downsampling; an odd trailing row or column is dropped.
    pub fn downsample2(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Image::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let s = self.get(2 * x, 2 * y, c)
                        + self.get(2 * x + 1, 2 * y, c)
                        + self.get(2 * x, 2 * y + 1, c)
                        + self.get(2 * x + 1, 2 * y + 1, c);
                    out.set(x, y, c, 0.25 * s);
                }
            }
        }
        out
    }

    /// Box downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Image::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += self.get(factor * x + dx, factor * y + dy, c);
                        }
                    }
                    out.set(x, y, c, s * norm);
                }
            }
        }
        out
    }
}

/// Peak signal-to-noise ratio for signals in [0,1], capped at
/// [`PSNR_CAP_DB`] for identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let n = a.data.len().max(1) as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

pub const PSNR_CAP_DB: f64 = 99.0;
