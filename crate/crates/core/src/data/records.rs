//! On-disk record formats: the paired frontal/profile manifest, verification
//! pair lists, identity galleries and labelled face lists.
//!
//! Relative paths inside a file are resolved against the file's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{profile_mouth_corner, LandmarkName, LandmarkSet, LandmarkSource, Point2D};

#[derive(Clone, Debug, PartialEq)]
pub struct FacePairRecord {
    pub identity_id: String,
    pub frontal_path: PathBuf,
    pub profile_path: PathBuf,
    pub frontal_landmarks: LandmarkSet,
    pub profile_landmarks: LandmarkSet,
    pub illumination_tag: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairLine {
    id: String,
    frontal: String,
    profile: String,
    frontal_lms: Vec<[f64; 2]>,
    profile_lms: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    illumination: Option<String>,
}

/// Profile landmarks from a `(nose_top, mouth, ear_point)` triplet. The
/// mouth corner is named for the side facing away from the ear, matching the
/// farther-corner rule used during alignment.
pub fn profile_landmarks_from_triplet(
    nose: Point2D,
    mouth: Point2D,
    ear: Point2D,
    source: LandmarkSource,
) -> LandmarkSet {
    let mouth_name = if ear.x < nose.x {
        LandmarkName::MouthRight
    } else {
        LandmarkName::MouthLeft
    };
    LandmarkSet::new(source)
        .with(LandmarkName::NoseTop, nose)
        .with(mouth_name, mouth)
        .with(LandmarkName::EarPoint, ear)
}

/// Reduce a profile landmark set to the three points stored in manifests.
pub fn profile_triplet(lms: &LandmarkSet) -> Result<[Point2D; 3]> {
    let mouth = lms.get(profile_mouth_corner(lms)?)?;
    Ok([
        lms.get(LandmarkName::NoseTop)?,
        mouth,
        lms.get(LandmarkName::EarPoint)?,
    ])
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn relativize(base: &Path, p: &Path) -> String {
    p.strip_prefix(base)
        .unwrap_or(p)
        .to_string_lossy()
        .into_owned()
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

fn points<const N: usize>(path: &Path, line: usize, key: &str, v: &[[f64; 2]]) -> Result<[Point2D; N]> {
    if v.len() != N {
        return Err(parse_err(
            path,
            line,
            format!("`{key}` needs {N} points, found {}", v.len()),
        ));
    }
    let mut out = [Point2D::default(); N];
    for (o, [x, y]) in out.iter_mut().zip(v) {
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_err(path, line, format!("`{key}` has a non-finite coordinate")));
        }
        *o = Point2D::new(*x, *y);
    }
    Ok(out)
}

pub fn load_pair_manifest(path: &Path) -> Result<Vec<FacePairRecord>> {
    let text = read_text(path)?;
    let base = base_dir(path);
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: PairLine =
            serde_json::from_str(raw).map_err(|e| parse_err(path, line_no, e))?;
        let frontal = points::<5>(path, line_no, "frontal_lms", &line.frontal_lms)?;
        let [nose, mouth, ear] = points::<3>(path, line_no, "profile_lms", &line.profile_lms)?;
        let record = FacePairRecord {
            identity_id: line.id,
            frontal_path: resolve(&base, &line.frontal),
            profile_path: resolve(&base, &line.profile),
            frontal_landmarks: LandmarkSet::from_frontal(frontal, LandmarkSource::Annotation),
            profile_landmarks: profile_landmarks_from_triplet(
                nose,
                mouth,
                ear,
                LandmarkSource::Annotation,
            ),
            illumination_tag: line.illumination,
        };
        for p in [&record.frontal_path, &record.profile_path] {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_pair_manifest(path: &Path, records: &[FacePairRecord]) -> Result<()> {
    let base = base_dir(path);
    let mut buf = Vec::new();
    for r in records {
        let frontal = r.frontal_landmarks.frontal_points()?;
        let profile = profile_triplet(&r.profile_landmarks)?;
        let line = PairLine {
            id: r.identity_id.clone(),
            frontal: relativize(&base, &r.frontal_path),
            profile: relativize(&base, &r.profile_path),
            frontal_lms: frontal.iter().map(|p| [p.x, p.y]).collect(),
            profile_lms: profile.iter().map(|p| [p.x, p.y]).collect(),
            illumination: r.illumination_tag.clone(),
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON document with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_bytes(path, &buf)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestPair {
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub same_identity: bool,
}

/// Whitespace-separated `path_a path_b label` lines, order preserved.
pub fn load_test_pairs(path: &Path) -> Result<Vec<TestPair>> {
    let text = read_text(path)?;
    let base = base_dir(path);
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [a, b, label] = fields[..] else {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        };
        let same_identity = match label {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(path, line_no, format!("label must be 0 or 1, got `{other}`"))),
        };
        if a == b {
            return Err(parse_err(path, line_no, "pair paths must differ"));
        }
        out.push(TestPair {
            path_a: resolve(&base, a),
            path_b: resolve(&base, b),
            same_identity,
        });
    }
    Ok(out)
}

pub fn write_test_pairs(path: &Path, pairs: &[TestPair]) -> Result<()> {
    let base = base_dir(path);
    let mut s = String::new();
    for p in pairs {
        s.push_str(&format!(
            "{} {} {}\n",
            relativize(&base, &p.path_a),
            relativize(&base, &p.path_b),
            u8::from(p.same_identity)
        ));
    }
    write_bytes(path, s.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: String,
    pub path: PathBuf,
    pub yaw_deg: i32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdentityGallery {
    pub entries: Vec<GalleryEntry>,
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(path, i + 1, e)))
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub fn load_gallery(path: &Path) -> Result<IdentityGallery> {
    let base = base_dir(path);
    let mut entries: Vec<GalleryEntry> = load_jsonl(path)?;
    for e in &mut entries {
        e.path = resolve(&base, &e.path.to_string_lossy());
    }
    Ok(IdentityGallery { entries })
}

pub fn write_gallery(path: &Path, gallery: &IdentityGallery) -> Result<()> {
    let base = base_dir(path);
    let entries: Vec<GalleryEntry> = gallery
        .entries
        .iter()
        .map(|e| GalleryEntry {
            path: PathBuf::from(relativize(&base, &e.path)),
            ..e.clone()
        })
        .collect();
    write_jsonl(path, &entries)
}

/// A labelled face image with its five frontal landmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub id: String,
    pub label: usize,
    pub path: PathBuf,
    pub lms: Vec<[f64; 2]>,
    pub yaw_deg: f64,
}

impl FaceRecord {
    pub fn landmarks(&self) -> Result<LandmarkSet> {
        let pts = points::<5>(&self.path, 0, "lms", &self.lms)?;
        Ok(LandmarkSet::from_frontal(pts, LandmarkSource::Annotation))
    }
}

pub fn load_faces(path: &Path) -> Result<Vec<FaceRecord>> {
    let base = base_dir(path);
    let mut faces: Vec<FaceRecord> = load_jsonl(path)?;
    for (i, f) in faces.iter_mut().enumerate() {
        f.path = resolve(&base, &f.path.to_string_lossy());
        if f.lms.len() != 5 {
            return Err(parse_err(path, i + 1, format!("`lms` needs 5 points, found {}", f.lms.len())));
        }
    }
    Ok(faces)
}

pub fn write_faces(path: &Path, faces: &[FaceRecord]) -> Result<()> {
    let base = base_dir(path);
    let rel: Vec<FaceRecord> = faces
        .iter()
        .map(|f| FaceRecord {
            path: PathBuf::from(relativize(&base, &f.path)),
            ..f.clone()
        })
        .collect();
    write_jsonl(path, &rel)
}

/// Externally supplied head pose, degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseAngles {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPoses {
    pub a: Option<PoseAngles>,
    pub b: Option<PoseAngles>,
}

pub fn load_pair_poses(path: &Path) -> Result<Vec<PairPoses>> {
    load_jsonl(path)
}

pub fn write_pair_poses(path: &Path, poses: &[PairPoses]) -> Result<()> {
    write_jsonl(path, poses)
}
