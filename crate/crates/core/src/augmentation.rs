//! Threshold-gated defrontalization augmentation.
//!
//! Alignment errors are computed once per training image. A calibrated
//! threshold makes roughly `target_fraction` of the images eligible, and each
//! visit of an eligible image is replaced by a synthesized profile of a
//! randomly chosen half with probability `apply_probability`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{bisect_horizontal, AlignedFace, HalfSide, LandmarkSet};
use crate::image::Image;
use crate::nets::DefrontModel;

pub const HISTOGRAM_BINS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// `None` until calibrated.
    pub error_threshold: Option<f64>,
    pub apply_probability: f64,
    pub target_fraction: f64,
    pub rng_seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            error_threshold: None,
            apply_probability: 1.0,
            target_fraction: 0.2,
            rng_seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// A policy that never defrontalizes.
    pub fn baseline(seed: u64) -> Self {
        Self {
            error_threshold: Some(0.0),
            rng_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.apply_probability) || !unit.contains(&self.target_fraction) {
            return Err(Error::ConfigInvalid(format!(
                "augmentation fractions must lie in [0, 1]: {self:?}"
            )));
        }
        if let Some(t) = self.error_threshold {
            if t.is_nan() || t < 0.0 {
                return Err(Error::ConfigInvalid(format!("negative error threshold {t}")));
            }
        }
        Ok(())
    }

    pub fn threshold(&self) -> Result<f64> {
        self.error_threshold.ok_or(Error::PolicyUncalibrated)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "apply", content = "side")]
pub enum AugmentationDecision {
    Keep,
    Defrontalize(HalfSide),
}

impl AugmentationDecision {
    pub fn applies(&self) -> bool {
        matches!(self, Self::Defrontalize(_))
    }

    pub fn side(&self) -> Option<HalfSide> {
        match self {
            Self::Keep => None,
            Self::Defrontalize(s) => Some(*s),
        }
    }
}

/// The `q`-quantile of `errors` with `q = target_fraction / apply_probability`,
/// chosen so that exactly `round(q·n)` errors lie strictly below it when the
/// errors are distinct.
pub fn calibrate_threshold(errors: &[f64], target_fraction: f64, apply_probability: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("no alignment errors to calibrate on".into()));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::ConfigInvalid("alignment errors must be finite".into()));
    }
    if !(apply_probability > 0.0) || !(target_fraction >= 0.0) {
        return Err(Error::InfeasibleTarget(target_fraction));
    }
    let q = target_fraction / apply_probability;
    if q > 1.0 {
        return Err(Error::InfeasibleTarget(q));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = ((q * n as f64).round() as usize).min(n);
    Ok(if k == n { sorted[n - 1].next_up() } else { sorted[k] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        let width = (max - min) / bins as f64;
        for v in values {
            let b = if width > 0.0 { ((v - min) / width) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1;
        }
        Self { min, max, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub threshold: f64,
    pub target_fraction: f64,
    pub apply_probability: f64,
    /// Fraction of images below the threshold.
    pub eligible_fraction: f64,
    /// Expected defrontalized fraction, `eligible_fraction · apply_probability`.
    pub realized_fraction: f64,
    pub num_errors: usize,
    pub histogram: Histogram,
    pub warnings: Vec<String>,
}

pub fn calibration_report(errors: &[f64], target_fraction: f64, apply_probability: f64) -> Result<CalibrationReport> {
    let threshold = calibrate_threshold(errors, target_fraction, apply_probability)?;
    let eligible = errors.iter().filter(|e| **e < threshold).count() as f64 / errors.len() as f64;
    let realized = eligible * apply_probability;
    let histogram = Histogram::new(errors, HISTOGRAM_BINS);
    let mut warnings = Vec::new();
    if histogram.min == histogram.max {
        warnings.push(format!(
            "all {} errors equal {}; realized fraction is {realized} instead of {target_fraction}",
            errors.len(),
            histogram.min
        ));
    } else if (realized - target_fraction).abs() > 0.02 {
        warnings.push(format!(
            "ties in the error distribution: realized fraction {realized} vs target {target_fraction}"
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(CalibrationReport {
        threshold,
        target_fraction,
        apply_probability,
        eligible_fraction: eligible,
        realized_fraction: realized,
        num_errors: errors.len(),
        histogram,
        warnings,
    })
}

/// Coordinates of one random draw: the stream is the epoch, the index the
/// sample's position in the dataset. Draws are independent of visit order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrawKey {
    pub epoch: u64,
    pub index: u64,
}

fn draw_uniforms(seed: u64, key: DrawKey) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key.epoch);
    rng.set_word_pos(key.index as u128 * 4);
    let u = |x: u64| (x >> 11) as f64 / (1u64 << 53) as f64;
    (u(rng.next_u64()), u(rng.next_u64()))
}

pub fn decide(error: f64, policy: &AugmentationPolicy, key: DrawKey) -> Result<AugmentationDecision> {
    let threshold = policy.threshold()?;
    if !(error < threshold) {
        return Ok(AugmentationDecision::Keep);
    }
    let (coin, side) = draw_uniforms(policy.rng_seed, key);
    if coin >= policy.apply_probability {
        return Ok(AugmentationDecision::Keep);
    }
    Ok(AugmentationDecision::Defrontalize(if side < 0.5 {
        HalfSide::Left
    } else {
        HalfSide::Right
    }))
}

/// Decisions for every sample of one epoch. Gate and coin are those of
/// [`decide`]; the selected samples are then ranked by their side draw and
/// the lower half goes left, the median (odd counts) by its own draw. Each
/// sample still takes either side with probability 1/2, and the epoch's split
/// is exact to within one.
pub fn decide_epoch(errors: &[f64], policy: &AugmentationPolicy, epoch: u64) -> Result<Vec<AugmentationDecision>> {
    let mut out = Vec::with_capacity(errors.len());
    let mut chosen = Vec::new();
    for (i, e) in errors.iter().enumerate() {
        let key = DrawKey { epoch, index: i as u64 };
        let d = decide(*e, policy, key)?;
        if d.applies() {
            chosen.push((draw_uniforms(policy.rng_seed, key).1, i));
        }
        out.push(d);
    }
    chosen.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = chosen.len();
    for (rank, (u, i)) in chosen.into_iter().enumerate() {
        let left = if 2 * rank + 1 == k { u < 0.5 } else { 2 * rank < k };
        out[i] = AugmentationDecision::Defrontalize(if left { HalfSide::Left } else { HalfSide::Right });
    }
    Ok(out)
}

/// A possibly absent defrontalization model, always run in eval mode.
pub struct Defrontalizer {
    model: Option<DefrontModel>,
    dtype: DType,
    device: Device,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefrontOutput {
    pub image: Image,
    /// Predicted foreground mask, single channel, in the output orientation.
    pub mask: Image,
}

impl Defrontalizer {
    pub fn new(model: DefrontModel) -> Self {
        let dtype = model.flow_store.dtype();
        let device = model.flow_store.device().clone();
        Self {
            model: Some(model),
            dtype,
            device,
        }
    }

    pub fn empty() -> Self {
        Self {
            model: None,
            dtype: DType::F32,
            device: Device::Cpu,
        }
    }

    pub fn model(&self) -> Option<&DefrontModel> {
        self.model.as_ref()
    }

    /// Synthesize a profile for every `(face, side)`. Right-side requests
    /// are bisected into the canonical left orientation, synthesized, and
    /// mirrored back.
    pub fn apply_batch(&self, items: &[(&AlignedFace, HalfSide)]) -> Result<Vec<DefrontOutput>> {
        let model = self.model.as_ref().ok_or(Error::ModelNotLoaded)?;
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let halves = items
            .iter()
            .map(|(f, s)| bisect_horizontal(f, *s))
            .collect::<Result<Vec<_>>>()?;
        let imgs: Vec<&Image> = halves.iter().map(|h| &h.image).collect();
        let x = crate::image::batch_tensor(&imgs, self.dtype, &self.device)?;
        let out = model.synthesize(&x)?;
        let images = out.finest_image();
        // Masks live in [0, 1]; shift so the image conversion keeps them.
        let masks = out.finest_mask().affine(2.0, -1.0)?;
        items
            .iter()
            .enumerate()
            .map(|(i, (_, side))| {
                let mut image = Image::from_tensor(&images.get(i)?)?;
                let mut mask = Image::from_tensor(&masks.get(i)?)?;
                if *side == HalfSide::Right {
                    image = image.mirror_horizontal();
                    mask = mask.mirror_horizontal();
                }
                Ok(DefrontOutput { image, mask })
            })
            .collect()
    }
}

pub fn apply_defrontalization(face: &AlignedFace, side: HalfSide, model: &Defrontalizer) -> Result<DefrontOutput> {
    Ok(model.apply_batch(&[(face, side)])?.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub image: Image,
    pub label: usize,
    pub decision: AugmentationDecision,
}

/// One training visit of `face`: the raw aligned image or its
/// defrontalized replacement. The label is passed through untouched.
pub fn augmented_sample(
    face: &AlignedFace,
    label: usize,
    error: f64,
    policy: &AugmentationPolicy,
    model: &Defrontalizer,
    key: DrawKey,
) -> Result<AugmentedSample> {
    let decision = decide(error, policy, key)?;
    let image = match decision {
        AugmentationDecision::Keep => face.image.clone(),
        AugmentationDecision::Defrontalize(side) => apply_defrontalization(face, side, model)?.image,
    };
    Ok(AugmentedSample { image, label, decision })
}

/// Hash of the template coordinates, used to invalidate cached errors.
pub fn template_hash(template: &LandmarkSet) -> String {
    let mut h = Sha256::new();
    for (name, p) in &template.points {
        h.update(name.as_str().as_bytes());
        h.update(p.x.to_le_bytes());
        h.update(p.y.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Alignment errors keyed by image path, valid for one template.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorCache {
    pub template_hash: String,
    pub errors: BTreeMap<PathBuf, f64>,
}

impl ErrorCache {
    pub fn new(template: &LandmarkSet) -> Self {
        Self {
            template_hash: template_hash(template),
            errors: BTreeMap::new(),
        }
    }

    pub fn get(&self, path: &Path) -> Option<f64> {
        self.errors.get(path).copied()
    }

    /// Image paths below the cache file's directory are stored relative to
    /// it, so a run directory can be moved.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let errors = self
            .errors
            .iter()
            .map(|(p, e)| (p.strip_prefix(base).unwrap_or(p).to_path_buf(), *e))
            .collect();
        crate::data::write_json(
            path,
            &Self {
                template_hash: self.template_hash.clone(),
                errors,
            },
        )
    }

    /// `None` when the file is missing or was computed for another template.
    pub fn load_for(path: &Path, template: &LandmarkSet) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let mut cache: Self = crate::data::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cache.errors = cache.errors.into_iter().map(|(p, e)| (base.join(p), e)).collect();
        Ok((cache.template_hash == template_hash(template)).then_some(cache))
    }
}
