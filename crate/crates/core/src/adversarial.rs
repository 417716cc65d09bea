//! Discriminators and the synthesis objective.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Linear, Padding, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_o: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_g: 0.01,
            lambda_o: 0.01,
            lambda_a: 0.1,
            lambda_b: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_g, self.lambda_o, self.lambda_a, self.lambda_b];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Patch discriminator on whole images.
#[derive(Debug, Clone)]
pub struct GlobalDiscriminator {
    pub convs: Vec<Conv2d>,
    pub score: Conv2d,
}

impl GlobalDiscriminator {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let widths = [3, 32, 64, 128];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ps.conv(rng, &format!("d_global.conv{i}"), w[0], w[1], 3, 2, Padding::Zero))
            .collect::<Result<Vec<_>>>()?;
        let score = ps.conv(rng, "d_global.score", 128, 1, 3, 2, Padding::Zero)?;
        Ok(Self { convs, score })
    }

    /// `(3, B, H, W)` images → `(1, B, H/16, W/16)` patch logits.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for c in &self.convs {
            x = nn::leaky_relu(&c.forward(&x)?)?;
        }
        self.score.forward(&x)
    }
}

/// Object discriminator on fixed-size crops with an auxiliary classifier.
#[derive(Debug, Clone)]
pub struct ObjectDiscriminator {
    pub convs: Vec<Conv2d>,
    pub real_fake: Linear,
    pub classes: Linear,
}

impl ObjectDiscriminator {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, num_classes: usize) -> Result<Self> {
        let widths = [3, 32, 64, 128];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ps.conv(rng, &format!("d_obj.conv{i}"), w[0], w[1], 3, 2, Padding::Zero))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            real_fake: ps.linear(rng, "d_obj.real_fake", 128, 1)?,
            classes: ps.linear(rng, "d_obj.classes", 128, num_classes)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.out_dim()
    }

    /// `(N, 3, S, S)` crops → (`(N, 1)` real/fake logits, `(N, classes)` class logits).
    pub fn forward(&self, crops: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut x = crops.transpose(0, 1)?.contiguous()?;
        for c in &self.convs {
            x = nn::leaky_relu(&c.forward(&x)?)?;
        }
        let (c, n, _, _) = x.dims4()?;
        let pooled = x.reshape((c, n, ()))?.mean(2)?.t()?;
        Ok((self.real_fake.forward(&pooled)?, self.classes.forward(&pooled)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

/// Adversarial loss from logits. The discriminator side is the negated
/// log-likelihood of labelling real as real and fake as fake; the generator
/// side is the non-saturating `−log D(fake)`. `real` is ignored for the
/// generator.
pub fn gan_loss(real: Option<&Tensor>, fake: &Tensor, side: Side) -> Result<Tensor> {
    match side {
        Side::Generator => nn::bce_with_logits(fake, 1.0),
        Side::Discriminator => {
            let real = real.ok_or_else(|| Error::Shape("discriminator loss needs real scores".into()))?;
            Ok((nn::bce_with_logits(real, 1.0)? + nn::bce_with_logits(fake, 0.0)?)?)
        }
    }
}

pub fn aux_class_loss(class_logits: &Tensor, categories: &[usize]) -> Result<Tensor> {
    nn::cross_entropy(class_logits, categories)
}

/// Scalar loss terms, already weighted into `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_b: f64,
    pub gan_g: f64,
    pub gan_o: f64,
    pub aux: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "step,L_r,L_b,gan_g,gan_o,aux,total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.l_r, self.l_b, self.gan_g, self.gan_o, self.aux, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.l_r, self.l_b, self.gan_g, self.gan_o, self.aux, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Differentiable terms of the generator objective. Absent adversarial terms
/// count as zero.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub l_r: Tensor,
    pub l_b: Option<Tensor>,
    pub gan_g: Option<Tensor>,
    pub gan_o: Option<Tensor>,
    pub aux: Option<Tensor>,
}

/// Mean absolute pixel error.
pub fn photometric_loss(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((generated - target)?.abs()?.mean_all()?)
}

/// Mean absolute box error over all coordinates of the given rows.
pub fn box_loss(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((predicted - target)?.abs()?.mean_all()?)
}

/// `L_r + λ_g·GAN_g + λ_o·GAN_o + λ_a·aux + λ_b·L_b`.
pub fn total_synthesis_loss(terms: &LossTerms, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let mut total = terms.l_r.clone();
    let mut parts = LossBreakdown {
        l_r: nn::scalar(&terms.l_r)?,
        ..Default::default()
    };
    let mut add = |t: &Option<Tensor>, weight: f64, slot: &mut f64| -> Result<()> {
        if let Some(t) = t {
            *slot = nn::scalar(t)?;
            if weight != 0.0 {
                total = (&total + (t * weight)?)?;
            }
        }
        Ok(())
    };
    add(&terms.l_b, w.lambda_b, &mut parts.l_b)?;
    add(&terms.gan_g, w.lambda_g, &mut parts.gan_g)?;
    add(&terms.gan_o, w.lambda_o, &mut parts.gan_o)?;
    add(&terms.aux, w.lambda_a, &mut parts.aux)?;
    parts.total = nn::scalar(&total)?;
    Ok((total, parts))
}
