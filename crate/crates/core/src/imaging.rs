//! Minimal RGB raster used throughout the pipeline.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};

/// Interleaved RGB image with `f32` samples on the 0..=255 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image buffer of {} samples does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel_mean(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        [
            (acc[0] / n) as f32,
            (acc[1] / n) as f32,
            (acc[2] / n) as f32,
        ]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    /// Quantizes to 8 bits, rounding to nearest.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length checked at construction")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| DataError::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Planar `(3, H, W)` tensor, normalized per channel.
    pub fn to_tensor(&self, norm: &PixelNorm, dtype: DType, device: &Device) -> Result<Tensor> {
        let plane = self.width * self.height;
        let mut planar = vec![0f32; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * plane + i] = (px[c] - norm.mean[c]) / norm.std[c];
            }
        }
        let t = Tensor::from_vec(planar, (3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// Read access to an RGB raster, independent of sample storage.
pub trait Raster {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    /// Sample of channel `c` at pixel `(x, y)` on the 0..=255 scale.
    fn sample(&self, x: usize, y: usize, c: usize) -> f32;

    fn channel_mean(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        for y in 0..self.height() {
            for x in 0..self.width() {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += self.sample(x, y, c) as f64;
                }
            }
        }
        let n = (self.width() * self.height()).max(1) as f64;
        acc.map(|a| (a / n) as f32)
    }
}

impl Raster for Image {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn sample(&self, x: usize, y: usize, c: usize) -> f32 {
        self.get(x, y, c)
    }

    fn channel_mean(&self) -> [f32; 3] {
        Image::channel_mean(self)
    }
}

impl Raster for image::RgbImage {
    fn width(&self) -> usize {
        image::RgbImage::width(self) as usize
    }

    fn height(&self) -> usize {
        image::RgbImage::height(self) as usize
    }

    #[inline]
    fn sample(&self, x: usize, y: usize, c: usize) -> f32 {
        let w = image::RgbImage::width(self) as usize;
        self.as_raw()[(y * w + x) * 3 + c] as f32
    }
}

/// Per-channel pixel statistics used to normalize model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PixelNorm {
    fn default() -> Self {
        Self {
            mean: [127.5; 3],
            std: [64.0; 3],
        }
    }
}

impl PixelNorm {
    /// Estimates statistics over a set of images.
    pub fn estimate<'a>(images: impl IntoIterator<Item = &'a Image>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0f64;
        for img in images {
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(1e-6);
            out.mean[c] = mean as f32;
            out.std[c] = var.sqrt().max(1.0) as f32;
        }
        out
    }
}
