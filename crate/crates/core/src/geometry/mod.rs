//! Landmark geometry: similarity/affine solvers, frontal and profile
//! alignment, alignment error and half-face bisection.

mod align;
mod solve;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use align::{
    align_frontal, align_profile, alignment_error, bisect_horizontal, profile_mouth_corner,
    warp_affine, AlignedFace, FaceSide, HalfSide,
};
pub use solve::{solve_affine_exact, solve_similarity};

/// Side length of every aligned face.
pub const ALIGNED_SIZE: usize = 112;

/// Column of the vertical nose/mouth line after profile alignment.
pub const PROFILE_MIDLINE_X: f64 = ALIGNED_SIZE as f64 / 2.0;

/// Tolerance used when checking that a linear map is a scaled rotation.
pub const SIMILARITY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Semantic landmark names. `left`/`right` refer to image sides, so
/// `left_eye` is the eye with the smaller x-coordinate in a frontal view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkName {
    LeftEye,
    RightEye,
    NoseTop,
    MouthLeft,
    MouthRight,
    EarPoint,
}

impl LandmarkName {
    pub const FRONTAL: [LandmarkName; 5] = [
        LandmarkName::LeftEye,
        LandmarkName::RightEye,
        LandmarkName::NoseTop,
        LandmarkName::MouthLeft,
        LandmarkName::MouthRight,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LandmarkName::LeftEye => "left_eye",
            LandmarkName::RightEye => "right_eye",
            LandmarkName::NoseTop => "nose_top",
            LandmarkName::MouthLeft => "mouth_left",
            LandmarkName::MouthRight => "mouth_right",
            LandmarkName::EarPoint => "ear_point",
        }
    }

    pub fn parse(s: &str) -> Option<LandmarkName> {
        Some(match s {
            "left_eye" => LandmarkName::LeftEye,
            "right_eye" => LandmarkName::RightEye,
            "nose_top" => LandmarkName::NoseTop,
            "mouth_left" => LandmarkName::MouthLeft,
            "mouth_right" => LandmarkName::MouthRight,
            "ear_point" => LandmarkName::EarPoint,
            _ => return None,
        })
    }

    /// Name of the same landmark after a horizontal mirror.
    pub fn mirrored(&self) -> LandmarkName {
        match self {
            LandmarkName::LeftEye => LandmarkName::RightEye,
            LandmarkName::RightEye => LandmarkName::LeftEye,
            LandmarkName::MouthLeft => LandmarkName::MouthRight,
            LandmarkName::MouthRight => LandmarkName::MouthLeft,
            other => *other,
        }
    }
}

impl fmt::Display for LandmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkSource {
    Detector,
    Annotation,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: BTreeMap<LandmarkName, Point2D>,
    pub source: LandmarkSource,
}

impl LandmarkSet {
    pub fn new(source: LandmarkSource) -> Self {
        Self {
            points: BTreeMap::new(),
            source,
        }
    }

    pub fn with(mut self, name: LandmarkName, p: Point2D) -> Self {
        self.points.insert(name, p);
        self
    }

    pub fn from_frontal(points: [Point2D; 5], source: LandmarkSource) -> Self {
        let mut set = LandmarkSet::new(source);
        for (name, p) in LandmarkName::FRONTAL.iter().zip(points) {
            set.points.insert(*name, p);
        }
        set
    }

    pub fn get(&self, name: LandmarkName) -> Result<Point2D> {
        self.points
            .get(&name)
            .copied()
            .ok_or(Error::MissingLandmark(name))
    }

    pub fn contains(&self, name: LandmarkName) -> bool {
        self.points.contains_key(&name)
    }

    /// The five frontal points in canonical order.
    pub fn frontal_points(&self) -> Result<[Point2D; 5]> {
        let mut out = [Point2D::default(); 5];
        for (o, name) in out.iter_mut().zip(LandmarkName::FRONTAL) {
            *o = self.get(name)?;
        }
        Ok(out)
    }

    pub fn transformed(&self, t: &Transform2D) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|(k, p)| (*k, t.apply(p))).collect(),
            source: self.source,
        }
    }

    /// Mirror about the vertical line through `width / 2` of a raster with
    /// `width` columns, swapping left/right names.
    pub fn mirrored(&self, width: usize) -> LandmarkSet {
        let w = (width - 1) as f64;
        LandmarkSet {
            points: self
                .points
                .iter()
                .map(|(k, p)| (k.mirrored(), Point2D::new(w - p.x, p.y)))
                .collect(),
            source: self.source,
        }
    }
}

/// Canonical five-point template for 112×112 aligned faces.
pub const ARCFACE_TEMPLATE_112: [Point2D; 5] = [
    Point2D::new(38.2946, 51.6963),
    Point2D::new(73.5318, 51.5014),
    Point2D::new(56.0252, 71.7366),
    Point2D::new(41.5493, 92.3655),
    Point2D::new(70.7299, 92.2041),
];

pub fn default_template() -> LandmarkSet {
    LandmarkSet::from_frontal(ARCFACE_TEMPLATE_112, LandmarkSource::Annotation)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Similarity,
    Affine,
}

/// A 2×3 matrix mapping `(x, y, 1)` to image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform2D {
    matrix: [[f64; 3]; 2],
    kind: TransformKind,
}

impl Transform2D {
    pub fn new(matrix: [[f64; 3]; 2], kind: TransformKind) -> Result<Self> {
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite transform".into()));
        }
        let t = Self { matrix, kind };
        if kind == TransformKind::Similarity && !t.is_scaled_rotation() {
            return Err(Error::DegenerateInput(
                "linear part is not a positive scaled rotation".into(),
            ));
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            kind: TransformKind::Similarity,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            matrix: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
            kind: TransformKind::Similarity,
        }
    }

    /// `p ↦ scale · R(rotation) · p + (tx, ty)`.
    pub fn from_similarity(scale: f64, rotation: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = rotation.sin_cos();
        Self {
            matrix: [[scale * c, -scale * s, tx], [scale * s, scale * c, ty]],
            kind: TransformKind::Similarity,
        }
    }

    /// Horizontal mirror of a raster with `width` columns.
    pub fn mirror_x(width: usize) -> Self {
        Self {
            matrix: [[-1.0, 0.0, (width - 1) as f64], [0.0, 1.0, 0.0]],
            kind: TransformKind::Affine,
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 2] {
        &self.matrix
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn apply(&self, p: &Point2D) -> Point2D {
        let m = &self.matrix;
        Point2D::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }

    /// `next ∘ self`: apply `self` first, then `next`.
    pub fn then(&self, next: &Transform2D) -> Transform2D {
        let a = &next.matrix;
        let b = &self.matrix;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            row[2] += a[r][2];
        }
        let kind = if self.kind == TransformKind::Similarity && next.kind == TransformKind::Similarity
        {
            TransformKind::Similarity
        } else {
            TransformKind::Affine
        };
        Transform2D { matrix: m, kind }
    }

    pub fn inverse(&self) -> Result<Transform2D> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::DegenerateInput("singular transform".into()));
        }
        let m = &self.matrix;
        let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        let tx = -(ia * m[0][2] + ib * m[1][2]);
        let ty = -(ic * m[0][2] + id * m[1][2]);
        Ok(Transform2D {
            matrix: [[ia, ib, tx], [ic, id, ty]],
            kind: self.kind,
        })
    }

    pub fn is_scaled_rotation(&self) -> bool {
        let m = &self.matrix;
        let scale = m[0][0].hypot(m[1][0]);
        let tol = SIMILARITY_TOLERANCE * scale.max(1.0);
        scale > 0.0 && (m[0][0] - m[1][1]).abs() <= tol && (m[0][1] + m[1][0]).abs() <= tol
    }

    pub fn scale(&self) -> f64 {
        self.matrix[0][0].hypot(self.matrix[1][0])
    }

    pub fn rotation(&self) -> f64 {
        self.matrix[1][0].atan2(self.matrix[0][0])
    }

    pub fn translation_part(&self) -> (f64, f64) {
        (self.matrix[0][2], self.matrix[1][2])
    }
}

/// Mean Euclidean distance between `t(src_i)` and `dst_i`.
pub fn mean_residual(t: &Transform2D, src: &[Point2D], dst: &[Point2D]) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    src.iter()
        .zip(dst)
        .map(|(s, d)| t.apply(s).distance(d))
        .sum::<f64>()
        / src.len() as f64
}

/// Resample `image` to an `ALIGNED_SIZE` square by `t` (source → output).
pub fn warp_to_aligned(image: &Image, t: &Transform2D) -> Result<Image> {
    warp_affine(image, t, ALIGNED_SIZE, ALIGNED_SIZE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_then_inverse_is_identity() {
        let a = Transform2D::from_similarity(1.7, 0.3, 4.0, -2.0);
        let b = Transform2D::mirror_x(112);
        let c = a.then(&b);
        assert_eq!(c.kind(), TransformKind::Affine);
        let back = c.then(&c.inverse().unwrap());
        let p = Point2D::new(13.0, 77.0);
        let q = back.apply(&p);
        assert!(p.distance(&q) < 1e-9);
    }

    #[test]
    fn similarity_kind_is_validated() {
        assert!(Transform2D::new([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0]], TransformKind::Similarity)
            .is_err());
        assert!(
            Transform2D::new([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], TransformKind::Similarity)
                .is_err()
        );
        assert!(Transform2D::new([[f64::NAN, 0.0, 0.0], [0.0, 1.0, 0.0]], TransformKind::Affine)
            .is_err());
        let t = Transform2D::from_similarity(2.0, 1.0, 0.0, 0.0);
        assert!(Transform2D::new(*t.matrix(), TransformKind::Similarity).is_ok());
    }

    #[test]
    fn mirrored_landmarks_swap_names() {
        let set = default_template();
        let m = set.mirrored(ALIGNED_SIZE);
        let le = m.get(LandmarkName::LeftEye).unwrap();
        assert!((le.x - (111.0 - 73.5318)).abs() < 1e-12);
        assert_eq!(m.mirrored(ALIGNED_SIZE), set);
    }
}
