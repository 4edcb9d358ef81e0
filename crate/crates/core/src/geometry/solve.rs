use super::{Point2D, Transform2D, TransformKind};
use crate::error::{Error, Result};

const COLLINEAR_EPS: f64 = 1e-9;

/// Least-squares similarity (scale, rotation, translation) mapping `src` onto
/// `dst`, closed form on centred coordinates. Exact for two point pairs.
pub fn solve_similarity(src: &[Point2D], dst: &[Point2D]) -> Result<Transform2D> {
    if src.len() != dst.len() {
        return Err(Error::DegenerateInput(format!(
            "{} source points vs {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 2 {
        return Err(Error::DegenerateInput(
            "similarity needs at least two correspondences".into(),
        ));
    }
    let n = src.len() as f64;
    let (sx, sy) = src.iter().fold((0.0, 0.0), |a, p| (a.0 + p.x, a.1 + p.y));
    let (dx, dy) = dst.iter().fold((0.0, 0.0), |a, p| (a.0 + p.x, a.1 + p.y));
    let (sx, sy, dx, dy) = (sx / n, sy / n, dx / n, dy / n);

    let mut norm = 0.0;
    let mut dot = 0.0;
    let mut cross = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (px, py) = (s.x - sx, s.y - sy);
        let (qx, qy) = (d.x - dx, d.y - dy);
        norm += px * px + py * py;
        dot += px * qx + py * qy;
        cross += px * qy - py * qx;
    }
    let spread = src
        .iter()
        .map(|p| (p.x - sx).abs().max((p.y - sy).abs()))
        .fold(0.0, f64::max);
    if spread <= 1e-12 * (1.0 + sx.abs().max(sy.abs())) {
        return Err(Error::DegenerateInput("all source points coincide".into()));
    }
    let a = dot / norm;
    let b = cross / norm;
    if a == 0.0 && b == 0.0 {
        return Err(Error::DegenerateInput(
            "destination collapses to a point".into(),
        ));
    }
    let tx = dx - (a * sx - b * sy);
    let ty = dy - (b * sx + a * sy);
    Transform2D::new([[a, -b, tx], [b, a, ty]], TransformKind::Similarity)
}

/// The unique affine map taking each of three source points to its target.
pub fn solve_affine_exact(src: &[Point2D; 3], dst: &[Point2D; 3]) -> Result<Transform2D> {
    let (e1x, e1y) = (src[1].x - src[0].x, src[1].y - src[0].y);
    let (e2x, e2y) = (src[2].x - src[0].x, src[2].y - src[0].y);
    let det = e1x * e2y - e2x * e1y;
    let scale = (e1x.abs() + e1y.abs()).max(e2x.abs() + e2y.abs()).max(1.0);
    if det.abs() < COLLINEAR_EPS * scale * scale {
        return Err(Error::DegenerateInput(
            "affine source points are collinear".into(),
        ));
    }
    // Linear part L solves L · [e1 e2] = [f1 f2].
    let (f1x, f1y) = (dst[1].x - dst[0].x, dst[1].y - dst[0].y);
    let (f2x, f2y) = (dst[2].x - dst[0].x, dst[2].y - dst[0].y);
    let inv = [[e2y / det, -e2x / det], [-e1y / det, e1x / det]];
    let a = f1x * inv[0][0] + f2x * inv[1][0];
    let b = f1x * inv[0][1] + f2x * inv[1][1];
    let c = f1y * inv[0][0] + f2y * inv[1][0];
    let d = f1y * inv[0][1] + f2y * inv[1][1];
    let tx = dst[0].x - (a * src[0].x + b * src[0].y);
    let ty = dst[0].y - (c * src[0].x + d * src[0].y);
    Transform2D::new([[a, b, tx], [c, d, ty]], TransformKind::Affine)
}
