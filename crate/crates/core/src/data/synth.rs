//! Procedural faces with analytic landmarks.
//!
//! A head is an ellipsoid with semi-axes `(rx, ry, rz)` (width, height,
//! depth) in units of the image size. Facial features live on the surface
//! at fixed parametric azimuths, except the nose, which is a thick segment
//! protruding from the surface. Rotating the head about the vertical axis by
//! the yaw angle and projecting orthographically gives both the rendering and
//! the landmark ground truth from the same parameters.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{LandmarkName, LandmarkSet, LandmarkSource, Point2D, Transform2D};
use crate::image::Image;

/// Yaw (degrees) from which the ear point is visible.
pub const EAR_VISIBLE_YAW: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InPlaneJitter {
    pub roll_deg: f64,
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Default for InPlaneJitter {
    fn default() -> Self {
        Self {
            roll_deg: 0.0,
            scale: 1.0,
            shift_x: 0.0,
            shift_y: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceSpec {
    pub identity_seed: u64,
    /// Degrees in `[-90, 90]`; positive yaw turns the image-left side of the
    /// face towards the camera.
    pub yaw: f64,
    /// Brightness multiplier in `[0.5, 1.5]`.
    pub illumination: f64,
    pub size: usize,
    #[serde(default)]
    pub jitter: InPlaneJitter,
}

impl SyntheticFaceSpec {
    pub fn new(identity_seed: u64, yaw: f64, illumination: f64, size: usize) -> Self {
        Self {
            identity_seed,
            yaw: yaw.clamp(-90.0, 90.0),
            illumination: illumination.clamp(0.5, 1.5),
            size,
            jitter: InPlaneJitter::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFace {
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub pose_label: f64,
}

/// Per-identity shape and colour parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityParams {
    rx: f64,
    ry: f64,
    rz: f64,
    eye_azimuth: f64,
    eye_y: f64,
    eye_w: f64,
    eye_h: f64,
    nose_y: f64,
    nose_len: f64,
    nose_r: f64,
    mouth_azimuth: f64,
    mouth_y: f64,
    lip_h: f64,
    ear_y: f64,
    ear_w: f64,
    ear_h: f64,
    hairline: f64,
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
}

impl IdentityParams {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let rx = u(0.26, 0.30);
        let ry = u(0.35, 0.39);
        let rz = rx * u(1.05, 1.2);
        let tone = u(0.35, 0.95);
        let t1 = u(0.65, 0.85);
        let t2 = u(0.7, 0.95);
        let skin = [tone, tone * t1, tone * t1 * t2];
        let hair = [u(0.05, 0.75), u(0.05, 0.75), u(0.05, 0.75)];
        let iris = [u(0.1, 0.7), u(0.1, 0.7), u(0.1, 0.7)];
        let lips = [skin[0] * u(0.8, 1.0), skin[1] * u(0.4, 0.6), skin[2] * u(0.45, 0.65)];
        Self {
            rx,
            ry,
            rz,
            eye_azimuth: u(0.50, 0.62),
            eye_y: u(-0.06, -0.03),
            eye_w: u(0.035, 0.045),
            eye_h: u(0.016, 0.022),
            nose_y: u(0.05, 0.08),
            nose_len: u(0.03, 0.05),
            nose_r: u(0.012, 0.018),
            mouth_azimuth: u(0.30, 0.42),
            mouth_y: u(0.14, 0.18),
            lip_h: u(0.012, 0.02),
            ear_y: u(-0.01, 0.03),
            ear_w: u(0.03, 0.04),
            ear_h: u(0.05, 0.065),
            hairline: u(-0.27, -0.17),
            skin,
            hair,
            iris,
            lips,
        }
    }

    fn k(&self, y: f64) -> f64 {
        (1.0 - (y / self.ry).powi(2)).max(0.0).sqrt()
    }

    /// Head-frame surface point at parametric azimuth `phi` and height `y`.
    fn surface(&self, phi: f64, y: f64) -> [f64; 3] {
        let k = self.k(y);
        [self.rx * phi.sin() * k, y, self.rz * phi.cos() * k]
    }

    fn nose_root(&self) -> [f64; 3] {
        self.surface(0.0, self.eye_y)
    }

    fn nose_tip(&self) -> [f64; 3] {
        let s = self.surface(0.0, self.nose_y);
        [0.0, self.nose_y, s[2] + self.nose_len]
    }
}

struct Pose {
    sin: f64,
    cos: f64,
}

impl Pose {
    fn new(yaw_deg: f64) -> Self {
        let (sin, cos) = yaw_deg.to_radians().sin_cos();
        Self { sin, cos }
    }

    /// Head frame → camera frame `(x', y, z')`.
    fn project(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] * self.cos + p[2] * self.sin,
            p[1],
            -p[0] * self.sin + p[2] * self.cos,
        ]
    }
}

fn smoothstep(x: f64, lo: f64, hi: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn scale3(c: [f64; 3], s: f64) -> [f64; 3] {
    [c[0] * s, c[1] * s, c[2] * s]
}

/// Distance from `p` to segment `a`–`b` and the segment parameter.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).hypot(p.1 - qy), t)
}

/// Colour of the canonical (un-jittered) scene at normalized camera-plane
/// coordinates, or `None` for background.
fn shade(params: &IdentityParams, pose: &Pose, illum: f64, x: f64, y: f64) -> Option<[f64; 3]> {
    // Nose first: it is drawn over the head whenever the face is not turned away.
    if pose.cos > -0.2 {
        let root = pose.project(params.nose_root());
        let tip = pose.project(params.nose_tip());
        let (d, t) = segment_distance((x, y), (root[0], root[1]), (tip[0], tip[1]));
        let radius = params.nose_r * (0.6 + 0.6 * t);
        if d <= radius {
            let s = illum * (0.75 + 0.2 * (1.0 - d / radius));
            return Some(scale3(params.skin, 0.85 * s));
        }
    }

    // Visible point on the rotated ellipsoid along the viewing ray.
    let kk = 1.0 - (y / params.ry).powi(2);
    if kk <= 0.0 {
        return None;
    }
    let (s, c) = (pose.sin, pose.cos);
    let (irx2, irz2) = (1.0 / (params.rx * params.rx), 1.0 / (params.rz * params.rz));
    let qa = s * s * irx2 + c * c * irz2;
    let qb = 2.0 * x * (-c * s * irx2 + s * c * irz2);
    let qc = x * x * (c * c * irx2 + s * s * irz2) - kk;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return None;
    }
    let zc = (-qb + disc.sqrt()) / (2.0 * qa);
    let xh = x * c - zc * s;
    let zh = x * s + zc * c;

    // Surface normal in camera space, for shading.
    let n = [xh * irx2, y / (params.ry * params.ry), zh * irz2];
    let nz_cam = -n[0] * s + n[2] * c;
    let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    let lambert = (nz_cam / norm).max(0.0);
    let light = illum * (0.45 + 0.55 * lambert);

    let k = kk.sqrt();
    let phi = (xh / (params.rx * k)).atan2(zh / (params.rz * k));
    let arc = params.rx.max(params.rz) * k;

    for side in [-1.0, 1.0] {
        let dphi = (phi - side * params.eye_azimuth) * arc;
        let dy = y - params.eye_y;
        let e = (dphi / params.eye_w).powi(2) + (dy / params.eye_h).powi(2);
        if e <= 1.0 {
            let r = (dphi / (0.45 * params.eye_w)).powi(2) + (dy / (0.9 * params.eye_h)).powi(2);
            let base = if r <= 0.3 {
                [0.02, 0.02, 0.02]
            } else if r <= 1.0 {
                params.iris
            } else {
                [0.92, 0.92, 0.9]
            };
            return Some(scale3(base, illum * (0.7 + 0.3 * lambert)));
        }
        let brow_y = params.eye_y - 2.4 * params.eye_h;
        if (y - brow_y).abs() < 0.009 && dphi.abs() < 1.2 * params.eye_w {
            return Some(scale3(params.hair, 0.7 * light));
        }

        let ear_dphi = (phi - side * PI / 2.0) * arc;
        let ear_dy = y - params.ear_y;
        let er = (ear_dphi / params.ear_w).powi(2) + (ear_dy / params.ear_h).powi(2);
        if er <= 1.0 {
            let f = if er > 0.45 { 0.9 } else { 0.65 };
            return Some(scale3(params.skin, f * light));
        }
    }

    let mouth_half = params.mouth_azimuth * arc;
    let mx = phi * arc;
    if mx.abs() <= mouth_half {
        let h = params.lip_h * (1.0 - (mx / mouth_half).powi(2)).max(0.0).sqrt();
        if (y - params.mouth_y).abs() <= h.max(0.002) {
            return Some(scale3(params.lips, light));
        }
    }

    let hairline = params.hairline
        + (0.6 * params.ry - params.hairline) * smoothstep(phi.abs(), 1.3, 2.2);
    if y < hairline {
        return Some(scale3(params.hair, light));
    }
    Some(scale3(params.skin, light))
}

fn jitter_transform(j: &InPlaneJitter, size: usize) -> Transform2D {
    let c = size as f64 / 2.0;
    let rot = Transform2D::from_similarity(j.scale, j.roll_deg.to_radians(), 0.0, 0.0);
    Transform2D::translation(-c, -c)
        .then(&rot)
        .then(&Transform2D::translation(c + j.shift_x, c + j.shift_y))
}

pub fn generate_synthetic_face(spec: &SyntheticFaceSpec) -> SyntheticFace {
    let params = IdentityParams::from_seed(spec.identity_seed);
    let pose = Pose::new(spec.yaw);
    let size = spec.size;
    let sz = size as f64;
    let center = sz / 2.0;
    let jitter = jitter_transform(&spec.jitter, size);
    let inv = jitter.inverse().expect("jitter scale is positive");

    let mut image = Image::zeros(size, size, 3);
    const OFFSETS: [f64; 2] = [-0.25, 0.25];
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f64; 3];
            for oy in OFFSETS {
                for ox in OFFSETS {
                    let q = inv.apply(&Point2D::new(px as f64 + ox, py as f64 + oy));
                    let x = (q.x - center) / sz;
                    let y = (q.y - center) / sz;
                    if let Some(col) = shade(&params, &pose, spec.illumination, x, y) {
                        for (a, v) in acc.iter_mut().zip(col) {
                            *a += v;
                        }
                    }
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                image.set(px, py, ch, (a / 4.0).clamp(0.0, 1.0) as f32);
            }
        }
    }

    let to_px = |p: [f64; 3]| {
        let c = pose.project(p);
        jitter.apply(&Point2D::new(center + sz * c[0], center + sz * c[1]))
    };
    let mut landmarks = LandmarkSet::new(LandmarkSource::Synthetic)
        .with(LandmarkName::LeftEye, to_px(params.surface(-params.eye_azimuth, params.eye_y)))
        .with(LandmarkName::RightEye, to_px(params.surface(params.eye_azimuth, params.eye_y)))
        .with(LandmarkName::NoseTop, to_px(params.nose_tip()))
        .with(
            LandmarkName::MouthLeft,
            to_px(params.surface(-params.mouth_azimuth, params.mouth_y)),
        )
        .with(
            LandmarkName::MouthRight,
            to_px(params.surface(params.mouth_azimuth, params.mouth_y)),
        );
    if spec.yaw.abs() >= EAR_VISIBLE_YAW {
        let side = if spec.yaw > 0.0 { -1.0 } else { 1.0 };
        landmarks
            .points
            .insert(LandmarkName::EarPoint, to_px(params.surface(side * PI / 2.0, params.ear_y)));
    }

    SyntheticFace {
        image,
        landmarks,
        pose_label: spec.yaw,
    }
}
