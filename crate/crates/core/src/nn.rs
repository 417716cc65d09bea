//! Small neural-network toolkit on top of `candle-core`.
//!
//! Feature maps are kept channel-major as `(C, B, H, W)`. A convolution is
//! one `(B·Ho·Wo × Cin·k²) · (Cin·k² × Cout)` matrix product on an im2row
//! buffer. Parameters live in a [`ParamStore`] with deterministic,
//! seeded initialization and stable (sorted) names.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Interpolation

/// Sparse bilinear weights mapping `dst_len` output samples onto the source
/// interval `[start, start + extent)` (in source pixel units) of a signal of
/// length `src_len`. Sample centres sit at half-pixel offsets; coordinates
/// are clamped to the signal.
pub fn interp_matrix(
    src_len: usize,
    dst_len: usize,
    start: f64,
    extent: f64,
) -> Vec<Vec<(usize, f64)>> {
    let max = (src_len - 1) as f64;
    (0..dst_len)
        .map(|i| {
            let s = (start + (i as f64 + 0.5) * extent / dst_len as f64 - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            let f = s - i0 as f64;
            if i1 == i0 || f == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - f), (i1, f)]
            }
        })
        .collect()
}

/// Dense `dst_len × src_len` version of [`interp_matrix`], row-major.
pub fn dense_interp(src_len: usize, dst_len: usize, start: f64, extent: f64) -> Vec<f64> {
    let mut m = vec![0.0; dst_len * src_len];
    for (i, row) in interp_matrix(src_len, dst_len, start, extent).into_iter().enumerate() {
        for (j, w) in row {
            m[i * src_len + j] += w;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// im2row / row2im

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    b: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mode: Padding,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Source coordinate for output position `o` and kernel tap `t`, or
    /// `None` for a zero-padded tap.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        if p >= 0 && (p as usize) < len {
            Some(p as usize)
        } else {
            match self.mode {
                Padding::Zero => None,
                Padding::Replicate => Some(p.clamp(0, len as isize - 1) as usize),
            }
        }
    }

    /// Source offsets (within one `H × W` plane) of every kernel tap for
    /// every output position, `None` for zero-padded taps.
    fn taps(&self) -> Vec<Option<usize>> {
        let (ho, wo) = self.out_hw();
        let kk = self.k * self.k;
        let mut t = Vec::with_capacity(ho * wo * kk);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        t.push(match (self.src(oy, ky, self.h), self.src(ox, kx, self.w)) {
                            (Some(iy), Some(ix)) => Some(iy * self.w + ix),
                            _ => None,
                        });
                    }
                }
            }
        }
        t
    }

    /// `(C, B, H, W)` → `(B·Ho·Wo, C·k·k)`: one row per output position.
    fn im2row<T: Copy + Default>(&self, x: &[T]) -> Vec<T> {
        if self.pad == 0 {
            return self.im2row_unpadded(x);
        }
        let (ho, wo) = self.out_hw();
        let kk = self.k * self.k;
        let width = self.c * kk;
        let plane = self.h * self.w;
        let taps = self.taps();
        let mut out = vec![T::default(); self.b * ho * wo * width];
        for bi in 0..self.b {
            for pos in 0..ho * wo {
                let row = &mut out[(bi * ho * wo + pos) * width..][..width];
                let tap = &taps[pos * kk..][..kk];
                for ci in 0..self.c {
                    let src = &x[(ci * self.b + bi) * plane..][..plane];
                    for (slot, t) in row[ci * kk..][..kk].iter_mut().zip(tap) {
                        if let Some(i) = t {
                            *slot = src[*i];
                        }
                    }
                }
            }
        }
        out
    }

    /// Every tap is in range, so each kernel row is one contiguous run of
    /// the input and the output is written strictly in order.
    fn im2row_unpadded<T: Copy>(&self, x: &[T]) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let (k, s, plane) = (self.k, self.stride, self.h * self.w);
        let mut out = Vec::with_capacity(self.b * ho * wo * self.c * k * k);
        for bi in 0..self.b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ci in 0..self.c {
                        let src = &x[(ci * self.b + bi) * plane..][..plane];
                        for ky in 0..k {
                            let at = (oy * s + ky) * self.w + ox * s;
                            out.extend_from_slice(&src[at..at + k]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::im2row`]: scatter-add rows back into the map.
    fn row2im<T: Copy + Default + std::ops::AddAssign>(&self, rows: &[T]) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let kk = self.k * self.k;
        let width = self.c * kk;
        let plane = self.h * self.w;
        let taps = self.taps();
        let mut out = vec![T::default(); self.c * self.b * plane];
        for bi in 0..self.b {
            for pos in 0..ho * wo {
                let row = &rows[(bi * ho * wo + pos) * width..][..width];
                let tap = &taps[pos * kk..][..kk];
                for ci in 0..self.c {
                    let dst = &mut out[(ci * self.b + bi) * plane..][..plane];
                    for (&v, t) in row[ci * kk..][..kk].iter().zip(tap) {
                        if let Some(i) = t {
                            dst[*i] += v;
                        }
                    }
                }
            }
        }
        out
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2row expects a contiguous input"),
    }
}

struct Im2Row(ConvGeom);
struct Row2Im(ConvGeom);

impl CustomOp1 for Im2Row {
    fn name(&self) -> &'static str {
        "im2row"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (ho, wo) = g.out_hw();
        let shape = Shape::from((g.b * ho * wo, g.c * g.k * g.k));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(g.im2row(contiguous_slice(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.im2row(contiguous_slice(v, l)?)),
            _ => candle_core::bail!("im2row supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Row2Im(self.0))?))
    }
}

impl CustomOp1 for Row2Im {
    fn name(&self) -> &'static str {
        "row2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.c, g.b, g.h, g.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(g.row2im(contiguous_slice(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.row2im(contiguous_slice(v, l)?)),
            _ => candle_core::bail!("row2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Row(self.0))?))
    }
}

struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(
                contiguous_slice(v, l)?
                    .iter()
                    .map(|&x| 1.0 / (1.0 + (-x).exp()))
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous_slice(v, l)?
                    .iter()
                    .map(|&x| 1.0 / (1.0 + (-x).exp()))
                    .collect(),
            ),
            _ => candle_core::bail!("sigmoid supports f32 and f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = (res * (1.0 - res)?)?;
        Ok(Some(grad.mul(&d)?))
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Sigmoid)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LEAKY_SLOPE)?)?)
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// `x`: `(N, in)` → `(N, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Two-layer perceptron with a leaky hidden activation and linear output.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp2 {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.output.forward(&leaky_relu(&self.hidden.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(Cout, Cin, k, k)`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl Conv2d {
    /// `x`: `(Cin, B, H, W)` → `(Cout, B, Ho, Wo)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (cout, cin, k, _) = self.weight.dims4()?;
        let (c, b, h, w) = x.dims4()?;
        if c != cin {
            return Err(Error::Shape(format!("conv expects {cin} input channels, got {c}")));
        }
        let geom = ConvGeom {
            c,
            b,
            h,
            w,
            k,
            stride: self.stride,
            pad: self.pad,
            mode: self.padding,
        };
        let (ho, wo) = geom.out_hw();
        let x = x.contiguous()?;
        let rows = if k == 1 && self.stride == 1 && self.pad == 0 {
            x.reshape((c, b * h * w))?.t()?
        } else {
            x.apply_op1(Im2Row(geom))?
        };
        // (positions × K) · (K × Cout) is the fast GEMM orientation here
        let w2 = self.weight.reshape((cout, cin * k * k))?;
        let y = rows.matmul(&w2.t()?)?.broadcast_add(&self.bias.unsqueeze(0)?)?;
        let y = y.t()?.contiguous()?;
        Ok(y.reshape((cout, b, ho, wo))?)
    }
}

/// Per-channel, per-image normalization over the spatial axes of a
/// `(C, B, H, W)` map followed by an affine transform. Statistics never mix
/// images, so a sample's output does not depend on its batch.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (c, b) = (dims[0], dims[1]);
        let flat = x.contiguous()?.reshape((c, b, ()))?;
        let mean = flat.mean_keepdim(2)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let y = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        let y = y
            .broadcast_mul(&self.gamma.reshape((c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((c, 1, 1))?)?;
        Ok(y.reshape(dims)?)
    }
}

/// Nearest-neighbour ×2 upsampling of a `(C, B, H, W)` map.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, b, h, w) = x.dims4()?;
    Ok(x
        .contiguous()?
        .reshape((c, b, h, 1, w, 1))?
        .broadcast_as((c, b, h, 2, w, 2))?
        .contiguous()?
        .reshape((c, b, 2 * h, 2 * w))?)
}

/// Average pooling by an integer factor of a `(C, B, H, W)` map.
pub fn avg_pool(x: &Tensor, f: usize) -> Result<Tensor> {
    if f == 1 {
        return Ok(x.clone());
    }
    let (c, b, h, w) = x.dims4()?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("cannot pool {h}x{w} by {f}")));
    }
    Ok(x
        .contiguous()?
        .reshape((c, b, h / f, f, w / f, f))?
        .sum(5)?
        .sum(3)?
        .affine(1.0 / (f * f) as f64, 0.0)?)
}

// ---------------------------------------------------------------------------
// Losses

/// Mean binary cross-entropy of `logits` against a constant label.
pub fn bce_with_logits(logits: &Tensor, target: f64) -> Result<Tensor> {
    let relu = logits.relu()?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((relu - (logits * target)?)?.add(&soft)?.mean_all()?)
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean cross-entropy of `(N, C)` logits against class indices.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if n != targets.len() {
        return Err(Error::Shape(format!("{n} logits rows for {} targets", targets.len())));
    }
    let mut onehot = vec![0.0f64; n * c];
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Shape(format!("class {t} out of range for {c} logits")));
        }
        onehot[i * c + t] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, c), logits.device())?.to_dtype(logits.dtype())?;
    Ok((log_softmax(logits)? * onehot)?.sum_all()?.affine(-1.0 / n as f64, 0.0)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

// ---------------------------------------------------------------------------
// Parameters

/// Named trainable tensors. Iteration order is the sorted name order.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    }

    pub fn linear(&mut self, rng: &mut ChaCha8Rng, name: &str, inp: usize, out: usize) -> Result<Linear> {
        let bound = 1.0 / (inp as f64).sqrt();
        Ok(Linear {
            weight: self.insert(&format!("{name}.weight"), Self::uniform(rng, inp * out, bound), &[out, inp])?,
            bias: self.insert(&format!("{name}.bias"), Self::uniform(rng, out, bound), &[out])?,
        })
    }

    pub fn mlp2(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        inp: usize,
        hidden: usize,
        out: usize,
    ) -> Result<Mlp2> {
        Ok(Mlp2 {
            hidden: self.linear(rng, &format!("{name}.0"), inp, hidden)?,
            output: self.linear(rng, &format!("{name}.1"), hidden, out)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Conv2d> {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Conv2d {
            weight: self.insert(
                &format!("{name}.weight"),
                Self::uniform(rng, cout * fan_in, bound),
                &[cout, cin, k, k],
            )?,
            bias: self.insert(&format!("{name}.bias"), Self::uniform(rng, cout, bound), &[cout])?,
            stride,
            pad: k / 2,
            padding,
        })
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.insert(&format!("{name}.gamma"), vec![1.0; c], &[c])?,
            beta: self.insert(&format!("{name}.beta"), vec![0.0; c], &[c])?,
        })
    }

    pub fn embedding(&mut self, rng: &mut ChaCha8Rng, name: &str, rows: usize, dim: usize) -> Result<Tensor> {
        let data = (0..rows * dim)
            .map(|_| StandardNormal.sample(rng))
            .collect::<Vec<f64>>();
        self.insert(name, data, &[rows, dim])
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter, checking its shape.
    pub fn assign(&self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        if var.dims() != shape {
            return Err(Error::Shape(format!(
                "parameter {name}: stored shape {shape:?}, model expects {:?}",
                var.dims()
            )));
        }
        let t = Tensor::from_slice(data, shape, &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction and no weight decay.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, var) in params.iter() {
            moments.insert(name.clone(), (var.zeros_like()?, var.zeros_like()?));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        })
    }

    pub fn apply(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("optimizer has no state for {name}")))?;
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let mhat = (&*m / c1)?;
            let vhat = (&*v / c2)?;
            let update = (mhat / (vhat.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor().detach() - (update * self.lr)?)?;
            var.set(&next)?;
        }
        Ok(())
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &(Tensor, Tensor))> {
        self.moments.iter()
    }

    pub fn set_moment(&mut self, name: &str, first: Tensor, second: Tensor) -> Result<()> {
        let slot = self
            .moments
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("unknown optimizer slot {name}")))?;
        if slot.0.dims() != first.dims() || slot.1.dims() != second.dims() {
            return Err(Error::Shape(format!("optimizer slot {name} has wrong shape")));
        }
        *slot = (first, second);
        Ok(())
    }
}
