//! Float images and PNG I/O.
//!
//! Color PNGs are 8-bit sRGB and are decoded to linear values. Masks are 8-bit
//! gray and are stored without a transfer curve.

use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::camera::ImageSize;

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub size: ImageSize,
    pub data: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub size: ImageSize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(size: ImageSize, c: [f64; 3]) -> RgbImage {
        RgbImage {
            size,
            data: vec![c; size.pixels()],
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> [f64; 3] {
        self.data[row * self.size.width + col]
    }

    /// Mean of each `factor × factor` block.
    pub fn downsample_box(&self, factor: usize) -> RgbImage {
        let size = ImageSize::new(self.size.width / factor, self.size.height / factor);
        let mut data = vec![[0.0; 3]; size.pixels()];
        let norm = 1.0 / (factor * factor) as f64;
        for (idx, out) in data.iter_mut().enumerate() {
            let (c, r) = (idx % size.width, idx / size.width);
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.get(c * factor + dx, r * factor + dy);
                    for k in 0..3 {
                        out[k] += p[k] * norm;
                    }
                }
            }
        }
        RgbImage { size, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.size.width as u32, self.size.height as u32);
        for (px, c) in buf.pixels_mut().zip(&self.data) {
            *px = image::Rgb([
                quantize(linear_to_srgb(c[0])),
                quantize(linear_to_srgb(c[1])),
                quantize(linear_to_srgb(c[2])),
            ]);
        }
        buf.save(path).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load_png(path: &Path) -> Result<RgbImage> {
        let img = image::open(path)
            .with_context(|| format!("reading {}", path.display()))?
            .to_rgb8();
        let size = ImageSize::new(img.width() as usize, img.height() as usize);
        let data = img
            .pixels()
            .map(|p| {
                [
                    srgb_to_linear(p[0] as f64 / 255.0),
                    srgb_to_linear(p[1] as f64 / 255.0),
                    srgb_to_linear(p[2] as f64 / 255.0),
                ]
            })
            .collect();
        Ok(RgbImage { size, data })
    }
}

impl GrayImage {
    pub fn filled(size: ImageSize, v: f64) -> GrayImage {
        GrayImage {
            size,
            data: vec![v; size.pixels()],
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.size.width + col]
    }

    pub fn downsample_box(&self, factor: usize) -> GrayImage {
        let size = ImageSize::new(self.size.width / factor, self.size.height / factor);
        let mut data = vec![0.0; size.pixels()];
        let norm = 1.0 / (factor * factor) as f64;
        for (idx, out) in data.iter_mut().enumerate() {
            let (c, r) = (idx % size.width, idx / size.width);
            for dy in 0..factor {
                for dx in 0..factor {
                    *out += self.get(c * factor + dx, r * factor + dy) * norm;
                }
            }
        }
        GrayImage { size, data }
    }

    pub fn binarized(&self, threshold: f64) -> GrayImage {
        GrayImage {
            size: self.size,
            data: self
                .data
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::GrayImage::new(self.size.width as u32, self.size.height as u32);
        for (px, v) in buf.pixels_mut().zip(&self.data) {
            *px = image::Luma([quantize(*v)]);
        }
        buf.save(path).with_context(|| format!("writing {}", path.display()))
    }

    /// 16-bit PNG with values mapped linearly from `[lo, hi]`.
    pub fn save_png16(&self, path: &Path, lo: f64, hi: f64) -> Result<()> {
        let mut buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::new(self.size.width as u32, self.size.height as u32);
        let span = (hi - lo).max(1e-12);
        for (px, v) in buf.pixels_mut().zip(&self.data) {
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            *px = image::Luma([(t * 65535.0).round() as u16]);
        }
        buf.save(path).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load_png(path: &Path) -> Result<GrayImage> {
        let img = image::open(path)
            .with_context(|| format!("reading {}", path.display()))?
            .to_luma8();
        let size = ImageSize::new(img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
        Ok(GrayImage { size, data })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

pub fn check_same_size(a: ImageSize, b: ImageSize, what: &str) -> Result<()> {
    if a != b {
        bail!(
            "{what}: size mismatch {}x{} vs {}x{}",
            a.width,
            a.height,
            b.width,
            b.height
        );
    }
    Ok(())
}
