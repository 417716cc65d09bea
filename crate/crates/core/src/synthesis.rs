//! Source-image branch and decoder.
//!
//! The source image is occluded with noise where content must be
//! regenerated, encoded by a 1×1 convolution, concatenated with the scene
//! layout and decoded by a cascade of refinement modules that double the
//! resolution at every stage.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BBox;
use crate::nn::{self, interp_matrix, Conv2d, Linear, Norm, Padding, ParamStore};
use crate::raster::{union_mask, PixelRect, RgbImage};

pub const NOISE_MEAN: f64 = 0.5;
pub const NOISE_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct OccludedImage {
    pub image: RgbImage,
    /// `H × W`, 1 inside occluded regions.
    pub indicator: Vec<f32>,
}

impl OccludedImage {
    /// `(4, H, W)`: RGB then indicator.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (h, w) = (self.image.height, self.image.width);
        let mut data = self.image.data.clone();
        data.extend_from_slice(&self.indicator);
        Ok(Tensor::from_vec(data, (4, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Replace the union of `regions` (clipped to the image) with clamped
/// Gaussian noise; everything else is copied bit for bit.
pub fn occlude<R: Rng>(image: &RgbImage, regions: &[PixelRect], fully_generative: bool, rng: &mut R) -> OccludedImage {
    let (h, w) = (image.height, image.width);
    let mask = if fully_generative {
        vec![true; h * w]
    } else {
        union_mask(regions, h, w)
    };
    let noise = Normal::new(NOISE_MEAN, NOISE_STD).expect("valid normal");
    let mut out = image.clone();
    let plane = h * w;
    for (p, &hidden) in mask.iter().enumerate() {
        if hidden {
            for c in 0..3 {
                out.data[c * plane + p] = noise.sample(rng).clamp(0.0, 1.0) as f32;
            }
        }
    }
    OccludedImage {
        image: out,
        indicator: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    }
}

/// 1×1 convolution over image + indicator, normalization, rectification.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ImageEncoder {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: ps.conv(rng, "encoder.conv", 4, channels, 1, 1, Padding::Zero)?,
            norm: ps.norm("encoder.norm", channels)?,
        })
    }

    /// `(4, B, H, W)` → `(channels, B, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Bilinear `size × size` crops of `boxes` from `(B, 3, H, W)` images;
/// each box is paired with the index of its image. Boxes thinner than a
/// pixel are widened to one pixel around their centre.
pub fn crop_regions(images: &Tensor, boxes: &[(usize, BBox)], size: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    let n = boxes.len();
    if n == 0 {
        return Err(Error::Shape("no regions to crop".into()));
    }
    let axis = |lo: f64, hi: f64, len: usize| -> Vec<f64> {
        let (mut start, mut extent) = (lo * len as f64, (hi - lo) * len as f64);
        if extent < 1.0 {
            start += 0.5 * extent - 0.5;
            extent = 1.0;
        }
        let mut m = vec![0.0; size * len];
        for (i, row) in interp_matrix(len, size, start, extent).into_iter().enumerate() {
            for (j, wt) in row {
                m[i * len + j] += wt;
            }
        }
        m
    };
    let mut ry = Vec::with_capacity(n * size * h);
    let mut rx = Vec::with_capacity(n * size * w);
    let mut which = Vec::with_capacity(n);
    for &(img, bb) in boxes {
        if img >= b {
            return Err(Error::Shape(format!("crop refers to image {img} of {b}")));
        }
        which.push(img as u32);
        ry.extend(axis(bb.top, bb.bottom, h));
        rx.extend(axis(bb.left, bb.right, w));
    }
    let dev = images.device();
    let dt = images.dtype();
    let ry = Tensor::from_vec(ry, (n, size, h), dev)?.to_dtype(dt)?;
    let rx = Tensor::from_vec(rx, (n, size, w), dev)?.to_dtype(dt)?;
    let src = images.index_select(&Tensor::from_vec(which, n, dev)?, 0)?;
    // rows: (n, size, c·w), then columns per channel
    let src = src.transpose(1, 2)?.contiguous()?.reshape((n, h, c * w))?;
    let rows = ry
        .matmul(&src)?
        .reshape((n, size, c, w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, c * size, w))?;
    Ok(rows.matmul(&rx.transpose(1, 2)?)?.reshape((n, c, size, size))?)
}

/// Strided convolutional encoder from an object crop to its appearance
/// vector.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
    pub crop_size: usize,
}

impl FeatureExtractor {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, feature_dim: usize, crop_size: usize) -> Result<Self> {
        let widths = [3, 32, 64, 128, 128];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ps.conv(rng, &format!("extractor.conv{i}"), w[0], w[1], 3, 2, Padding::Zero))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            fc: ps.linear(rng, "extractor.fc", 128, feature_dim)?,
            crop_size,
        })
    }

    /// `(N, 3, S, S)` crops → `(N, feature_dim)`.
    pub fn forward(&self, crops: &Tensor) -> Result<Tensor> {
        let mut x = crops.transpose(0, 1)?.contiguous()?;
        for conv in &self.convs {
            x = nn::leaky_relu(&conv.forward(&x)?)?;
        }
        let (c, n, _, _) = x.dims4()?;
        let pooled = x.reshape((c, n, ()))?.mean(2)?;
        self.fc.forward(&pooled.t()?)
    }

    pub fn extract(&self, images: &Tensor, boxes: &[(usize, BBox)]) -> Result<Tensor> {
        self.forward(&crop_regions(images, boxes, self.crop_size)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrnConfig {
    /// Output channels of each refinement module, coarse to fine.
    pub widths: Vec<usize>,
    /// Output side length.
    pub resolution: usize,
}

impl CrnConfig {
    pub fn paper(resolution: usize) -> Self {
        Self {
            widths: vec![1024, 512, 256, 128, 64],
            resolution,
        }
    }

    pub fn desk(resolution: usize) -> Self {
        Self {
            widths: vec![64, 64, 32, 32, 16],
            resolution,
        }
    }

    /// Side of the input before the first module upsamples it.
    pub fn coarsest(&self) -> usize {
        self.resolution >> self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("refinement widths must be positive and non-empty".into()));
        }
        let k = self.widths.len();
        if k >= usize::BITS as usize || self.coarsest() == 0 || self.coarsest() << k != self.resolution {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{k}",
                self.resolution
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RefinementModule {
    pub conv1: Conv2d,
    pub norm1: Norm,
    pub conv2: Conv2d,
    pub norm2: Norm,
}

#[derive(Debug, Clone)]
pub struct Crn {
    pub cfg: CrnConfig,
    pub modules: Vec<RefinementModule>,
    pub to_rgb: Conv2d,
}

impl Crn {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: CrnConfig, input_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut modules = Vec::new();
        let mut prev = input_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let name = format!("crn.module{i}");
            modules.push(RefinementModule {
                conv1: ps.conv(rng, &format!("{name}.conv1"), prev + input_channels, w, 3, 1, Padding::Replicate)?,
                norm1: ps.norm(&format!("{name}.norm1"), w)?,
                conv2: ps.conv(rng, &format!("{name}.conv2"), w, w, 3, 1, Padding::Replicate)?,
                norm2: ps.norm(&format!("{name}.norm2"), w)?,
            });
            prev = w;
        }
        let to_rgb = ps.conv(rng, "crn.to_rgb", prev, 3, 1, 1, Padding::Zero)?;
        Ok(Self { cfg, modules, to_rgb })
    }

    /// `(C, B, R, R)` conditioning input → `(3, B, R, R)` image in `[0, 1]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = input.dims4()?;
        let r = self.cfg.resolution;
        if h != r || w != r {
            return Err(Error::Shape(format!("decoder expects {r}x{r} input, got {h}x{w}")));
        }
        let mut side = self.cfg.coarsest();
        let mut x = nn::avg_pool(input, r / side)?;
        for m in &self.modules {
            side *= 2;
            let skip = nn::avg_pool(input, r / side)?;
            x = Tensor::cat(&[&nn::upsample2(&x)?, &skip], 0)?;
            x = nn::leaky_relu(&m.norm1.forward(&m.conv1.forward(&x)?)?)?;
            x = nn::leaky_relu(&m.norm2.forward(&m.conv2.forward(&x)?)?)?;
        }
        nn::sigmoid(&self.to_rgb.forward(&x)?)
    }

    /// Decode from a layout and source-image features, both `(·, B, R, R)`.
    pub fn decode(&self, layout: &Tensor, image_features: &Tensor) -> Result<Tensor> {
        self.forward(&Tensor::cat(&[layout, image_features], 0)?)
    }
}
