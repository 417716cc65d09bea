//! Scene layout: every node's mask is resized into its box, multiplied by the
//! node's feature vector and the per-node canvases are summed.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BBox, ObjectNode};
use crate::nn::dense_interp;
use crate::raster::PixelRect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    GroundTruth,
    Predicted,
    /// Centre from the node's original box, size from the prediction.
    Anchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedBox {
    pub bbox: BBox,
    pub rect: PixelRect,
    pub source: BoxSource,
    /// The box had no area and was widened to one pixel.
    pub degenerate: bool,
}

/// Pick the box a node is drawn into.
pub fn resolve_box(node: &ObjectNode, x_hat: [f64; 4], height: usize, width: usize) -> ResolvedBox {
    let (bbox, source) = match (node.bbox, node.bbox_masked) {
        (Some(b), false) => (b, BoxSource::GroundTruth),
        (Some(anchor), true) if node.anchor => {
            let (cy, cx) = anchor.center();
            let h = (x_hat[2] - x_hat[0]).max(0.0);
            let w = (x_hat[3] - x_hat[1]).max(0.0);
            (BBox::from_center_size(cy, cx, h, w), BoxSource::Anchored)
        }
        _ => (BBox::from(x_hat), BoxSource::Predicted),
    };
    let clamped = BBox::new(
        bbox.top.clamp(0.0, 1.0),
        bbox.left.clamp(0.0, 1.0),
        bbox.bottom.clamp(0.0, 1.0),
        bbox.right.clamp(0.0, 1.0),
    );
    let degenerate = clamped.bottom <= clamped.top || clamped.right <= clamped.left;
    ResolvedBox {
        bbox: clamped,
        rect: clamped.to_pixel_rect(height, width),
        source,
        degenerate,
    }
}

/// `(H × M)` matrix that resamples an `M`-long mask axis into the rows
/// `[lo, hi)` of an `H`-long canvas axis, zero elsewhere.
fn placement_matrix(m: usize, len: usize, lo: usize, hi: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * m];
    let inner = dense_interp(m, hi - lo, 0.0, m as f64);
    out[lo * m..hi * m].copy_from_slice(&inner);
    out
}

fn placement_tensors(
    rects: &[PixelRect],
    m: usize,
    height: usize,
    width: usize,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let n = rects.len();
    let mut ry = Vec::with_capacity(n * height * m);
    let mut rx = Vec::with_capacity(n * width * m);
    for r in rects {
        let r = r.clip(height, width);
        if r.is_empty() {
            return Err(Error::Shape(format!("empty placement rectangle {r:?}")));
        }
        ry.extend(placement_matrix(m, height, r.y0, r.y1));
        rx.extend(placement_matrix(m, width, r.x0, r.x1));
    }
    Ok((
        Tensor::from_vec(ry, (n, height, m), device)?.to_dtype(dtype)?,
        Tensor::from_vec(rx, (n, width, m), device)?.to_dtype(dtype)?,
    ))
}

/// Bilinearly resize `masks` `(N, M, M)` into their rectangles on an
/// `H × W` canvas: `(N, H, W)`, zero outside each rectangle.
pub fn place_masks(masks: &Tensor, rects: &[PixelRect], height: usize, width: usize) -> Result<Tensor> {
    let (n, m, m2) = masks.dims3()?;
    if m != m2 || n != rects.len() {
        return Err(Error::Shape(format!(
            "{n} masks of {m}x{m2} for {} rectangles",
            rects.len()
        )));
    }
    let (ry, rx) = placement_tensors(rects, m, height, width, masks.dtype(), masks.device())?;
    Ok(ry.matmul(masks)?.matmul(&rx.transpose(1, 2)?)?)
}

/// One node's `(C, H, W)` canvas: the mask resized into `rect` times
/// `feature` (length `C`), zeros elsewhere.
pub fn project_node(mask: &Tensor, rect: PixelRect, feature: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let placed = place_masks(&mask.unsqueeze(0)?, &[rect], height, width)?;
    let c = feature.dims1()?;
    Ok(feature
        .reshape((c, 1, 1))?
        .broadcast_mul(&placed)?)
}

/// Sum of per-node canvases; the empty sum is all zeros.
pub fn compose(canvases: &[Tensor], channels: usize, height: usize, width: usize, dtype: DType) -> Result<Tensor> {
    let mut acc = Tensor::zeros((channels, height, width), dtype, &Device::Cpu)?;
    for c in canvases {
        acc = (acc + c)?;
    }
    Ok(acc)
}

/// Layouts for a batch of images at once, channel-major `(C, B, H, W)`.
///
/// `masks`: `(N, M, M)`, `features`: `(N, C)`, one rectangle and image index
/// per node.
pub fn batch_layout(
    masks: &Tensor,
    features: &Tensor,
    rects: &[PixelRect],
    image_of_node: &[usize],
    batch: usize,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let (n, c) = features.dims2()?;
    let dtype = features.dtype();
    if n == 0 {
        return Ok(Tensor::zeros((c, batch, height, width), dtype, features.device())?);
    }
    if image_of_node.len() != n {
        return Err(Error::Shape("one image index per node required".into()));
    }
    let placed = place_masks(masks, rects, height, width)?;
    let mut onehot = vec![0.0f64; n * batch];
    for (i, &b) in image_of_node.iter().enumerate() {
        if b >= batch {
            return Err(Error::Shape(format!("node {i} assigned to image {b} of {batch}")));
        }
        onehot[i * batch + b] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, batch, 1, 1), features.device())?.to_dtype(dtype)?;
    let spread = placed
        .unsqueeze(1)?
        .broadcast_mul(&onehot)?
        .reshape((n, batch * height * width))?;
    Ok(features
        .t()?
        .matmul(&spread)?
        .reshape((c, batch, height, width))?)
}

/// Write one grayscale PNG per projected mask and a heatmap of the per-pixel
/// feature norm of a `(C, H, W)` layout.
pub fn export_debug(dir: impl AsRef<Path>, placed: &Tensor, layout: &Tensor) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let placed: Vec<Vec<Vec<f32>>> = placed.to_dtype(DType::F32)?.to_vec3()?;
    for (i, m) in placed.iter().enumerate() {
        let (h, w) = (m.len(), m[0].len());
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([(m[y as usize][x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(dir.join(format!("node_{i:02}.png")))?;
    }
    let norm = layout.to_dtype(DType::F32)?.sqr()?.sum(0)?.sqrt()?;
    let norm: Vec<Vec<f32>> = norm.to_vec2()?;
    let max = norm
        .iter()
        .flatten()
        .fold(0.0f32, |a, &b| a.max(b))
        .max(f32::MIN_POSITIVE);
    let (h, w) = (norm.len(), norm[0].len());
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| heat(norm[y as usize][x as usize] / max));
    img.save(dir.join("layout_norm.png"))?;
    Ok(())
}

/// Black → red → yellow → white ramp.
pub(crate) fn heat(v: f32) -> image::Rgb<u8> {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let r = v.min(1.0);
    let g = (v - 1.0).clamp(0.0, 1.0);
    let b = (v - 2.0).clamp(0.0, 1.0);
    image::Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}
