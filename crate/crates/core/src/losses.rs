//! Training objectives of the defrontalization model and the additive
//! angular margin loss of the embedding model.
//!
//! Multi-scale terms take slices ordered like [`crate::nets::SCALES`]. With
//! [`Reduction::Mean`] each scale contributes the mean absolute difference
//! over its elements; [`Reduction::Sum`] uses the raw L1 sum instead.

use std::f64::consts::PI;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{IdentityNet, PerceptualNet, IDENTITY_TAPS, PERCEPTUAL_TAPS};

/// Probability clamp for every logarithm.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// `-mean log d_fake`.
    #[default]
    NonSaturating,
    /// `mean log(1 - d_fake)`, the literal min-max form.
    Saturating,
}

fn l1(a: &Tensor, b: &Tensor, red: Reduction) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), b.dims()));
    }
    let d = (a - b)?.abs()?;
    Ok(match red {
        Reduction::Mean => d.mean_all()?,
        Reduction::Sum => d.sum_all()?,
    })
}

fn multi_scale_l1(a: &[Tensor], b: &[Tensor], red: Reduction) -> Result<Tensor> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("{} scales", a.len()), b.len()));
    }
    let mut total = l1(&a[0], &b[0], red)?;
    for (x, y) in a.iter().zip(b).skip(1) {
        total = (total + l1(x, y, red)?)?;
    }
    Ok(total)
}

/// Multi-scale L1 between synthesized and ground-truth profiles.
pub fn pixel_loss(synth: &[Tensor], gt: &[Tensor], red: Reduction) -> Result<Tensor> {
    multi_scale_l1(synth, gt, red)
}

/// Weighted L1 between perceptual feature taps.
pub fn perceptual_loss(
    net: &PerceptualNet,
    synth: &Tensor,
    gt: &Tensor,
    layer_weights: &[f64; 5],
    red: Reduction,
) -> Result<Tensor> {
    let a = net.taps(synth, &PERCEPTUAL_TAPS)?;
    let b = net.taps(gt, &PERCEPTUAL_TAPS)?;
    let mut total = Tensor::zeros((), synth.dtype(), synth.device())?;
    for (tap, w) in PERCEPTUAL_TAPS.iter().zip(layer_weights) {
        total = (total + (l1(&a[*tap], &b[*tap], red)? * *w)?)?;
    }
    Ok(total)
}

/// `(discriminator term, generator term)` from probability maps.
pub fn adversarial_loss(
    d_real: &Tensor,
    d_fake: &Tensor,
    objective: GeneratorObjective,
) -> Result<(Tensor, Tensor)> {
    let real = d_real.clamp(EPS, 1.0 - EPS)?;
    let fake = d_fake.clamp(EPS, 1.0 - EPS)?;
    let log_real = real.log()?.mean_all()?;
    let log_one_minus_fake = fake.affine(-1.0, 1.0)?.log()?.mean_all()?;
    let disc = (log_real + &log_one_minus_fake)?.neg()?;
    let gen = match objective {
        GeneratorObjective::NonSaturating => fake.log()?.mean_all()?.neg()?,
        GeneratorObjective::Saturating => log_one_minus_fake,
    };
    Ok((disc, gen))
}

/// Multi-scale L1 between the synthesis warped back to the frontal domain
/// and the frontal input.
pub fn illumination_preserving_loss(warped: &[Tensor], frontal: &[Tensor], red: Reduction) -> Result<Tensor> {
    multi_scale_l1(warped, frontal, red)
}

/// L1 between the identity network's `fc2` and `pool` features.
pub fn identity_preserving_loss(net: &IdentityNet, synth: &Tensor, gt: &Tensor, red: Reduction) -> Result<Tensor> {
    let a = net.taps(synth, &IDENTITY_TAPS)?;
    let b = net.taps(gt, &IDENTITY_TAPS)?;
    Ok((l1(&a["fc2"], &b["fc2"], red)? + l1(&a["pool"], &b["pool"], red)?)?)
}

/// Binary cross-entropy between a clamped prediction and a binary target,
/// averaged over elements.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("{:?}", pred.dims()), target.dims()));
    }
    let p = pred.clamp(EPS, 1.0 - EPS)?;
    let pos = (target * p.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Sum over scales of the mean mask cross-entropy.
pub fn mask_loss(pred: &[Tensor], gt: &[Tensor]) -> Result<Tensor> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(format!("{} scales", pred.len()), gt.len()));
    }
    let mut total = bce(&pred[0], &gt[0])?;
    for (p, g) in pred.iter().zip(gt).skip(1) {
        total = (total + bce(p, g)?)?;
    }
    Ok(total)
}

/// Perceptual layer weights for `conv1_1` through `conv5_1`.
pub const PERCEPTUAL_LAYER_WEIGHTS: [f64; 5] = [1.0, 0.5, 0.25, 0.25, 0.125];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub illumination: f64,
    pub identity: f64,
    pub mask: f64,
    #[serde(default = "default_layer_weights")]
    pub perceptual_layers: [f64; 5],
}

fn default_layer_weights() -> [f64; 5] {
    PERCEPTUAL_LAYER_WEIGHTS
}

impl Default for LossWeights {
    /// A tunable preset; only the mask weight of 1 is fixed.
    fn default() -> Self {
        Self {
            pixel: 10.0,
            perceptual: 1.0,
            adversarial: 0.1,
            illumination: 1.0,
            identity: 1.0,
            mask: 1.0,
            perceptual_layers: PERCEPTUAL_LAYER_WEIGHTS,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.pixel,
            self.perceptual,
            self.adversarial,
            self.illumination,
            self.identity,
            self.mask,
        ];
        if all.iter().chain(&self.perceptual_layers).any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::ConfigInvalid(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.pixel,
            self.perceptual,
            self.adversarial,
            self.illumination,
            self.identity,
            self.mask,
        ]
    }
}

/// The six scalar components of the generator objective.
#[derive(Clone, Debug)]
pub struct LossComponents {
    pub pixel: Tensor,
    pub perceptual: Tensor,
    pub adversarial: Tensor,
    pub illumination: Tensor,
    pub identity: Tensor,
    pub mask: Tensor,
}

impl LossComponents {
    pub const NAMES: [&'static str; 6] = ["pixel", "perceptual", "adversarial", "illumination", "identity", "mask"];

    pub fn as_array(&self) -> [&Tensor; 6] {
        [
            &self.pixel,
            &self.perceptual,
            &self.adversarial,
            &self.illumination,
            &self.identity,
            &self.mask,
        ]
    }

    pub fn values(&self) -> Result<[f64; 6]> {
        let mut out = [0.0; 6];
        for (o, t) in out.iter_mut().zip(self.as_array()) {
            *o = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(out)
    }
}

/// `Σ λ_i · L_i` over the six components.
pub fn total_loss(weights: &LossWeights, c: &LossComponents) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (w, t) in weights.as_array().iter().zip(c.as_array()) {
        let term = (t * *w)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("six terms"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub scale: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
    pub num_classes: usize,
}

impl MarginConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            scale: 64.0,
            margin: 0.5,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(0.0..PI / 2.0).contains(&self.margin) || self.num_classes == 0 {
            return Err(Error::ConfigInvalid(format!("invalid margin config {self:?}")));
        }
        Ok(())
    }
}

/// Logits `s·cos θ_j` with the target replaced by `s·cos(θ_y + m)`.
///
/// Past `θ_y = π - m` the target falls back to `s·(cos θ_y - m·sin m)`,
/// which keeps the logit monotone in `θ_y`. `embeddings` `(N, D)` and the
/// rows of `class_weights` `(K, D)` are assumed unit-norm.
pub fn margin_logits(
    embeddings: &Tensor,
    class_weights: &Tensor,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let (n, _) = embeddings.dims2()?;
    let (k, _) = class_weights.dims2()?;
    if k != cfg.num_classes {
        return Err(Error::shape(format!("{} class rows", cfg.num_classes), k));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{n} labels"), labels.len()));
    }
    if let Some(&label) = labels.iter().find(|l| **l >= k) {
        return Err(Error::LabelOutOfRange { label, num_classes: k });
    }
    let dev = embeddings.device();
    let dtype = embeddings.dtype();
    let cos = embeddings.matmul(&class_weights.t()?)?.clamp(-1.0, 1.0)?;
    let mut onehot = vec![0f64; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, k), dev)?.to_dtype(dtype)?;
    let cos_y = (&cos * &onehot)?.sum_keepdim(1)?;
    let sin_y = (cos_y.sqr()?.affine(-1.0, 1.0)?.relu()? + 1e-12)?.sqrt()?;
    let (m, s) = (cfg.margin, cfg.scale);
    let phi = (cos_y.affine(m.cos(), 0.0)? - sin_y.affine(m.sin(), 0.0)?)?;
    let th = (PI - m).cos();
    let mm = (PI - m).sin() * m;
    let fallback = cos_y.affine(1.0, -mm)?;
    let above = cos_y.gt(th)?.to_dtype(dtype)?;
    let target = ((&above * &phi)? + (above.affine(-1.0, 1.0)? * fallback)?)?;
    let delta = (target - &cos_y)?;
    Ok((cos + onehot.broadcast_mul(&delta)?)?.affine(s, 0.0)?)
}

/// Mean cross-entropy over the margin logits.
pub fn margin_softmax_loss(
    embeddings: &Tensor,
    class_weights: &Tensor,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<Tensor> {
    let logits = margin_logits(embeddings, class_weights, labels, cfg)?;
    cross_entropy(&logits, labels)
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let mut onehot = vec![0f64; n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, k), logits.device())?.to_dtype(logits.dtype())?;
    Ok((log_p * onehot)?.sum_all()?.affine(-1.0 / n as f64, 0.0)?)
}
