//! Aligned in-memory training samples and their batch tensors.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{FacePairRecord, FaceRecord};
use crate::error::{Error, Result};
use crate::geometry::{
    align_frontal, align_profile, alignment_error, bisect_horizontal, AlignedFace, HalfSide,
    LandmarkName, LandmarkSet,
};
use crate::image::{batch_tensor, Image};
use crate::nets::{resize_to, SCALES};

/// Pixel level above which an aligned profile counts as foreground.
pub const MASK_LEVEL: f32 = 0.02;

/// An aligned frontal/profile pair in the canonical orientation: the kept
/// frontal half is always on the left and the profile faces right.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub id: String,
    pub frontal: AlignedFace,
    pub half: HalfSide,
    pub frontal_half: Image,
    pub profile: Image,
}

/// The frontal half visible in a profile: the image-left half when the ear
/// lies left of the nose.
pub fn pair_half_side(profile_lms: &LandmarkSet) -> Result<HalfSide> {
    let ear = profile_lms.get(LandmarkName::EarPoint)?;
    let nose = profile_lms.get(LandmarkName::NoseTop)?;
    Ok(if ear.x < nose.x { HalfSide::Left } else { HalfSide::Right })
}

pub fn prepare_pair(record: &FacePairRecord, template: &LandmarkSet) -> Result<PairSample> {
    let frontal_img = Image::load_png(&record.frontal_path)?;
    let profile_img = Image::load_png(&record.profile_path)?;
    let frontal = align_frontal(&frontal_img, &record.frontal_landmarks, template)?;
    let profile = align_profile(&profile_img, &record.profile_landmarks, &frontal)?;
    let half = pair_half_side(&record.profile_landmarks)?;
    let frontal_half = bisect_horizontal(&frontal, half)?.image;
    Ok(PairSample {
        id: record.identity_id.clone(),
        frontal,
        half,
        frontal_half,
        profile: profile.image,
    })
}

pub fn prepare_pairs(records: &[FacePairRecord], template: &LandmarkSet) -> Result<Vec<PairSample>> {
    records.par_iter().map(|r| prepare_pair(r, template)).collect()
}

/// Multi-scale tensors of a pair batch, each list ordered like [`SCALES`].
pub struct PairBatch {
    pub frontal: Vec<Tensor>,
    pub profile: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

impl PairBatch {
    pub fn input(&self) -> &Tensor {
        self.frontal.last().expect("three scales")
    }

    pub fn target(&self) -> &Tensor {
        self.profile.last().expect("three scales")
    }
}

/// `x` at every scale of [`SCALES`], coarsest first.
pub fn pyramid(x: &Tensor) -> Result<Vec<Tensor>> {
    SCALES.iter().map(|&s| resize_to(x, s)).collect()
}

pub fn pair_batch(samples: &[&PairSample], dtype: DType, device: &Device) -> Result<PairBatch> {
    let halves: Vec<&Image> = samples.iter().map(|s| &s.frontal_half).collect();
    let profiles: Vec<&Image> = samples.iter().map(|s| &s.profile).collect();
    let masks: Vec<Image> = samples.iter().map(|s| s.profile.foreground_mask(MASK_LEVEL)).collect();
    let mask_refs: Vec<&Image> = masks.iter().collect();
    // batch_tensor maps [0, 1] to [-1, 1]; undo that for the binary masks.
    let m = batch_tensor(&mask_refs, dtype, device)?.affine(0.5, 0.5)?;
    let masks = SCALES
        .iter()
        .map(|&s| Ok(resize_to(&m, s)?.ge(0.5)?.to_dtype(dtype)?))
        .collect::<Result<_>>()?;
    Ok(PairBatch {
        frontal: pyramid(&batch_tensor(&halves, dtype, device)?)?,
        profile: pyramid(&batch_tensor(&profiles, dtype, device)?)?,
        masks,
    })
}

/// A frontally aligned training face with its cached alignment error.
#[derive(Clone, Debug)]
pub struct FaceSample {
    pub path: PathBuf,
    pub label: usize,
    pub face: AlignedFace,
    pub error: f64,
}

pub fn prepare_face(record: &FaceRecord, template: &LandmarkSet) -> Result<FaceSample> {
    let lms = record.landmarks()?;
    let img = Image::load_png(&record.path)?;
    let face = align_frontal(&img, &lms, template)?;
    Ok(FaceSample {
        path: record.path.clone(),
        label: record.label,
        error: alignment_error(&lms, template)?,
        face,
    })
}

pub fn prepare_faces(records: &[FaceRecord], template: &LandmarkSet) -> Result<Vec<FaceSample>> {
    records.par_iter().map(|r| prepare_face(r, template)).collect()
}

/// Sample order of one epoch; a pure function of `(n, seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Fails if any training path is also an evaluation path.
pub fn assert_disjoint<'a>(
    train: impl IntoIterator<Item = &'a Path>,
    eval: impl IntoIterator<Item = &'a Path>,
) -> Result<()> {
    let eval: HashSet<&Path> = eval.into_iter().collect();
    let shared: Vec<String> = train
        .into_iter()
        .filter(|p| eval.contains(p))
        .map(|p| p.display().to_string())
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigInvalid(format!(
            "{} training images are also evaluation images, e.g. {}",
            shared.len(),
            shared[0]
        )))
    }
}
