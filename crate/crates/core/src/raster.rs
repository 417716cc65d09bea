//! Planar RGB images and pixel rectangles.
//!
//! Images are stored channel-major (`3 × H × W`) as `f32` in `[0, 1]`, the
//! same order the network consumes. PNG files are 8-bit sRGB without any
//! colour management.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl PixelRect {
    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn is_empty(&self) -> bool {
        self.height() == 0 || self.width() == 0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    /// Intersect with the `height × width` canvas.
    pub fn clip(&self, height: usize, width: usize) -> PixelRect {
        PixelRect {
            y0: self.y0.min(height),
            x0: self.x0.min(width),
            y1: self.y1.min(height),
            x1: self.x1.min(width),
        }
    }
}

/// Binary `H × W` mask covering the union of `rects`.
pub fn union_mask(rects: &[PixelRect], height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    for r in rects {
        let r = r.clip(height, width);
        for y in r.y0..r.y1 {
            mask[y * width + r.x0..y * width + r.x1].fill(true);
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `3 × height × width`, channel-major.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p.0[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Round every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Inverse of [`RgbImage::to_tensor`]; accepts `(3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    /// Bilinear resize, half-pixel centres.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let ry = crate::nn::interp_matrix(self.height, height, 0.0, self.height as f64);
        let rx = crate::nn::interp_matrix(self.width, width, 0.0, self.width as f64);
        let mut out = Self::new(width, height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let mut acc = 0.0f64;
                    for &(sy, wy) in &ry[y] {
                        for &(sx, wx) in &rx[x] {
                            acc += wy * wx * self.get(c, sy, sx) as f64;
                        }
                    }
                    out.set(c, y, x, acc as f32);
                }
            }
        }
        out
    }
}
