use serde::{Deserialize, Serialize};

use super::{
    mean_residual, solve_affine_exact, solve_similarity, LandmarkName, LandmarkSet, Point2D,
    Transform2D, ALIGNED_SIZE, PROFILE_MIDLINE_X,
};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceSide {
    Full,
    LeftHalf,
    RightHalf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfSide {
    Left,
    Right,
}

/// A 112×112 face together with the transform that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFace {
    pub image: Image,
    pub transform: Transform2D,
    pub residual_error: f64,
    pub side: FaceSide,
    /// Input landmarks mapped into aligned coordinates.
    pub landmarks: LandmarkSet,
}

impl AlignedFace {
    pub fn new(
        image: Image,
        transform: Transform2D,
        residual_error: f64,
        side: FaceSide,
        landmarks: LandmarkSet,
    ) -> Result<Self> {
        if image.width() != ALIGNED_SIZE || image.height() != ALIGNED_SIZE {
            return Err(Error::shape(
                format!("{ALIGNED_SIZE}x{ALIGNED_SIZE}"),
                (image.width(), image.height()),
            ));
        }
        if !(residual_error >= 0.0) {
            return Err(Error::InvalidState(format!(
                "residual error must be non-negative, got {residual_error}"
            )));
        }
        Ok(Self {
            image,
            transform,
            residual_error,
            side,
            landmarks,
        })
    }
}

/// Resample `image` into an `out_w × out_h` raster; `t` maps source pixel
/// coordinates to output pixel coordinates. Bilinear, edge-clamped.
pub fn warp_affine(image: &Image, t: &Transform2D, out_w: usize, out_h: usize) -> Result<Image> {
    if image.is_empty() {
        return Err(Error::EmptyInput("image has no pixels".into()));
    }
    let inv = t.inverse()?;
    let mut out = Image::zeros(out_w, out_h, image.channels());
    let mut px = vec![0f32; image.channels()];
    for y in 0..out_h {
        for x in 0..out_w {
            let s = inv.apply(&Point2D::new(x as f64, y as f64));
            image.sample_bilinear(s.x, s.y, &mut px);
            for (c, v) in px.iter().enumerate() {
                out.set(x, y, c, *v);
            }
        }
    }
    Ok(out)
}

/// Five-point similarity alignment onto `template`.
pub fn align_frontal(image: &Image, landmarks: &LandmarkSet, template: &LandmarkSet) -> Result<AlignedFace> {
    let src = landmarks.frontal_points()?;
    let dst = template.frontal_points()?;
    let t = solve_similarity(&src, &dst)?;
    let warped = super::warp_to_aligned(image, &t)?;
    let residual = mean_residual(&t, &src, &dst);
    AlignedFace::new(warped, t, residual, FaceSide::Full, landmarks.transformed(&t))
}

/// Mean landmark residual after the best-fit similarity onto `template`.
pub fn alignment_error(landmarks: &LandmarkSet, template: &LandmarkSet) -> Result<f64> {
    let src = landmarks.frontal_points()?;
    let dst = template.frontal_points()?;
    let t = solve_similarity(&src, &dst)?;
    Ok(mean_residual(&t, &src, &dst))
}

/// The mouth corner used for profile alignment. When both corners are
/// present the one farther from the ear point wins (ties go to `mouth_left`).
pub fn profile_mouth_corner(lms: &LandmarkSet) -> Result<LandmarkName> {
    let left = lms.points.get(&LandmarkName::MouthLeft);
    let right = lms.points.get(&LandmarkName::MouthRight);
    match (left, right) {
        (Some(_), None) => Ok(LandmarkName::MouthLeft),
        (None, Some(_)) => Ok(LandmarkName::MouthRight),
        (None, None) => Err(Error::MissingLandmark(LandmarkName::MouthLeft)),
        (Some(l), Some(r)) => {
            let ear = lms.get(LandmarkName::EarPoint)?;
            if r.distance(&ear) > l.distance(&ear) {
                Ok(LandmarkName::MouthRight)
            } else {
                Ok(LandmarkName::MouthLeft)
            }
        }
    }
}

/// Two-stage profile alignment against an aligned frontal face of the same
/// identity.
///
/// Stage A is the exact similarity putting the nose top and the chosen mouth
/// corner on the vertical midline at the frontal face's heights. Stage B is
/// the exact affine map that keeps both of those points fixed and sends the
/// ear point to `x = 0` at its stage-A height. A profile whose ear lies right
/// of the midline is therefore mirrored, so every aligned profile faces the
/// same way.
pub fn align_profile(
    image: &Image,
    profile_lms: &LandmarkSet,
    frontal_ref: &AlignedFace,
) -> Result<AlignedFace> {
    let nose = profile_lms.get(LandmarkName::NoseTop)?;
    let ear = profile_lms.get(LandmarkName::EarPoint)?;
    let mouth_name = profile_mouth_corner(profile_lms)?;
    let mouth = profile_lms.get(mouth_name)?;

    let y_nose = frontal_ref.landmarks.get(LandmarkName::NoseTop)?.y;
    let y_mouth = frontal_ref.landmarks.get(mouth_name)?.y;
    let nose_target = Point2D::new(PROFILE_MIDLINE_X, y_nose);
    let mouth_target = Point2D::new(PROFILE_MIDLINE_X, y_mouth);

    let stage_a = solve_similarity(&[nose, mouth], &[nose_target, mouth_target])?;
    let ear_a = stage_a.apply(&ear);
    let stage_b = solve_affine_exact(
        &[stage_a.apply(&nose), stage_a.apply(&mouth), ear_a],
        &[nose_target, mouth_target, Point2D::new(0.0, ear_a.y)],
    )?;
    let full = stage_a.then(&stage_b);

    let src = [nose, mouth, ear];
    let dst = [nose_target, mouth_target, Point2D::new(0.0, ear_a.y)];
    let residual = mean_residual(&full, &src, &dst);
    let warped = super::warp_to_aligned(image, &full)?;
    AlignedFace::new(warped, full, residual, FaceSide::Full, profile_lms.transformed(&full))
}

/// Keep one half of a full aligned face and zero the other. Right halves are
/// mirrored into the canonical left orientation.
pub fn bisect_horizontal(face: &AlignedFace, side: HalfSide) -> Result<AlignedFace> {
    if face.side != FaceSide::Full {
        return Err(Error::InvalidState(format!(
            "face is already bisected ({:?})",
            face.side
        )));
    }
    let half = ALIGNED_SIZE / 2;
    let src = &face.image;
    let mut out = Image::zeros(ALIGNED_SIZE, ALIGNED_SIZE, src.channels());
    for y in 0..ALIGNED_SIZE {
        for x in 0..half {
            let sx = match side {
                HalfSide::Left => x,
                HalfSide::Right => ALIGNED_SIZE - 1 - x,
            };
            for c in 0..src.channels() {
                out.set(x, y, c, src.get(sx, y, c));
            }
        }
    }
    let (transform, landmarks, tag) = match side {
        HalfSide::Left => (face.transform, face.landmarks.clone(), FaceSide::LeftHalf),
        HalfSide::Right => (
            face.transform.then(&Transform2D::mirror_x(ALIGNED_SIZE)),
            face.landmarks.mirrored(ALIGNED_SIZE),
            FaceSide::RightHalf,
        ),
    };
    AlignedFace::new(out, transform, face.residual_error, tag, landmarks)
}
