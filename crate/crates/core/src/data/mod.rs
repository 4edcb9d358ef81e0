//! Dataset manifests, the landmark-detector client and the synthetic face
//! corpus used for desk-scale experiments.

mod detector;
mod records;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use detector::{
    fetch_landmarks, DetectorClient, DetectorConfig, NameMapping, Transport, TransportError,
    UreqTransport, ENV_ENDPOINT, ENV_KEY,
};
pub use records::{
    load_faces, load_gallery, load_pair_manifest, load_pair_poses, load_test_pairs,
    profile_landmarks_from_triplet, profile_triplet, write_faces, write_gallery,
    read_json, write_json, write_pair_manifest, write_pair_poses, write_test_pairs, FacePairRecord, FaceRecord,
    GalleryEntry, IdentityGallery, PairPoses, PoseAngles, TestPair,
};
pub(crate) use records::write_bytes;
pub use synth::{
    generate_synthetic_face, IdentityParams, InPlaneJitter, SyntheticFace, SyntheticFaceSpec,
    EAR_VISIBLE_YAW,
};

use crate::error::{Error, Result};

/// File names inside a synthetic dataset directory.
pub mod layout {
    pub const PAIR_IMAGES: &str = "images";
    pub const PAIRS: &str = "pairs.jsonl";
    pub const FACE_IMAGES: &str = "faces";
    pub const FACES: &str = "faces.jsonl";
    pub const TEST_IMAGES: &str = "test";
    pub const TEST_FACES: &str = "test_faces.jsonl";
    pub const TEST_PAIRS: &str = "test_pairs.txt";
    pub const TEST_PAIR_POSES: &str = "test_pair_poses.jsonl";
    pub const GALLERY: &str = "gallery.jsonl";
    pub const PROBES: &str = "probes.jsonl";
    pub const INFO: &str = "dataset.json";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    pub n_identities: usize,
    /// Yaw angles rendered for the paired set. Every non-zero pose is paired
    /// with the identity's 0° rendering.
    pub poses: Vec<f64>,
    pub seed: u64,
    pub render_size: usize,
    /// Near-frontal renders per identity for embedding training.
    pub faces_per_identity: usize,
    /// Embedding-training yaw is uniform in `[-face_yaw_max, face_yaw_max]`.
    pub face_yaw_max: f64,
    /// Probe yaws for the test split; the gallery is always 0°.
    pub test_poses: Vec<f64>,
    pub jitter: bool,
}

impl SyntheticDatasetConfig {
    pub fn new(n_identities: usize, poses: &[f64], seed: u64) -> Self {
        Self {
            n_identities,
            poses: poses.to_vec(),
            seed,
            render_size: 128,
            faces_per_identity: 0,
            face_yaw_max: 30.0,
            test_poses: Vec::new(),
            jitter: true,
        }
    }

    /// Probe yaws in ±15° steps out to ±90°.
    pub fn multipie_poses() -> Vec<f64> {
        (1..=6).flat_map(|k| [-15.0 * k as f64, 15.0 * k as f64]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub dir: PathBuf,
    pub pair_manifest: PathBuf,
    pub faces: PathBuf,
    pub test_faces: PathBuf,
    pub test_pairs: PathBuf,
    pub test_pair_poses: PathBuf,
    pub gallery: PathBuf,
    pub probes: PathBuf,
    pub digest: String,
}

impl SyntheticDataset {
    pub fn at(dir: &Path) -> Self {
        use layout::*;
        Self {
            dir: dir.to_path_buf(),
            pair_manifest: dir.join(PAIRS),
            faces: dir.join(FACES),
            test_faces: dir.join(TEST_FACES),
            test_pairs: dir.join(TEST_PAIRS),
            test_pair_poses: dir.join(TEST_PAIR_POSES),
            gallery: dir.join(GALLERY),
            probes: dir.join(PROBES),
            digest: String::new(),
        }
    }
}

fn pose_tag(yaw: f64) -> String {
    let sign = if yaw < 0.0 { 'm' } else { 'p' };
    format!("{sign}{:03}", yaw.abs().round() as i64)
}

fn identity_name(i: usize) -> String {
    format!("id{i:04}")
}

struct Job {
    spec: SyntheticFaceSpec,
    path: PathBuf,
}

fn render_all(jobs: &[Job]) -> Result<Vec<SyntheticFace>> {
    jobs.par_iter()
        .map(|job| {
            let face = generate_synthetic_face(&job.spec);
            face.image.save_png(&job.path)?;
            Ok(face)
        })
        .collect()
}

fn jitter(rng: &mut ChaCha8Rng, enabled: bool) -> InPlaneJitter {
    if !enabled {
        return InPlaneJitter::default();
    }
    InPlaneJitter {
        roll_deg: rng.random_range(-8.0..8.0),
        scale: rng.random_range(0.92..1.08),
        shift_x: rng.random_range(-4.0..4.0),
        shift_y: rng.random_range(-4.0..4.0),
    }
}

fn face_record(id: usize, path: &Path, face: &SyntheticFace) -> Result<FaceRecord> {
    let pts = face.landmarks.frontal_points()?;
    Ok(FaceRecord {
        id: identity_name(id),
        label: id,
        path: path.to_path_buf(),
        lms: pts.iter().map(|p| [p.x, p.y]).collect(),
        yaw_deg: face.pose_label,
    })
}

/// Render a complete synthetic corpus into `dir`: a paired frontal/profile
/// set, a near-frontal embedding-training set and a test split with
/// verification pairs, a one-frontal-per-identity gallery and yaw-labelled
/// probes. The directory digest is a pure function of the config.
pub fn build_synthetic_dataset(dir: &Path, cfg: &SyntheticDatasetConfig) -> Result<SyntheticDataset> {
    use layout::*;
    if cfg.n_identities < 2 {
        return Err(Error::ConfigInvalid(format!(
            "synthetic dataset needs at least 2 identities, got {}",
            cfg.n_identities
        )));
    }
    if let Some(y) = cfg.poses.iter().find(|y| **y != 0.0 && y.abs() < EAR_VISIBLE_YAW) {
        return Err(Error::ConfigInvalid(format!(
            "paired pose {y} hides the ear point; profile poses need |yaw| >= {EAR_VISIBLE_YAW}"
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let size = cfg.render_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let identity_seeds: Vec<u64> = (0..cfg.n_identities).map(|_| rng.random()).collect();
    let illum: Vec<f64> = (0..cfg.n_identities).map(|_| rng.random_range(0.75..1.25)).collect();

    // Paired set: one rendering per (identity, pose), shared illumination.
    let mut jobs = Vec::new();
    for (i, &seed) in identity_seeds.iter().enumerate() {
        for &yaw in &cfg.poses {
            let mut spec = SyntheticFaceSpec::new(seed, yaw, illum[i], size);
            spec.jitter = jitter(&mut rng, cfg.jitter);
            let path = dir.join(PAIR_IMAGES).join(format!("{}_{}.png", identity_name(i), pose_tag(yaw)));
            jobs.push(Job { spec, path });
        }
    }
    let faces = render_all(&jobs)?;
    let per_id = cfg.poses.len();
    let frontal_idx = cfg.poses.iter().position(|y| *y == 0.0);
    let mut pairs = Vec::new();
    if let Some(f) = frontal_idx {
        for i in 0..cfg.n_identities {
            let fr = i * per_id + f;
            for (k, &yaw) in cfg.poses.iter().enumerate() {
                if yaw == 0.0 {
                    continue;
                }
                let pr = i * per_id + k;
                let profile = &faces[pr].landmarks;
                let [nose, mouth, ear] = profile_triplet(profile)?;
                pairs.push(FacePairRecord {
                    identity_id: identity_name(i),
                    frontal_path: jobs[fr].path.clone(),
                    profile_path: jobs[pr].path.clone(),
                    frontal_landmarks: faces[fr].landmarks.clone(),
                    profile_landmarks: profile_landmarks_from_triplet(
                        nose,
                        mouth,
                        ear,
                        faces[pr].landmarks.source,
                    ),
                    illumination_tag: Some(format!("{:.3}", illum[i])),
                });
            }
        }
    }
    write_pair_manifest(&dir.join(PAIRS), &pairs)?;

    // Embedding-training set.
    let mut jobs = Vec::new();
    for (i, &seed) in identity_seeds.iter().enumerate() {
        for k in 0..cfg.faces_per_identity {
            let yaw = if cfg.face_yaw_max > 0.0 {
                rng.random_range(-cfg.face_yaw_max..=cfg.face_yaw_max)
            } else {
                0.0
            };
            let mut spec = SyntheticFaceSpec::new(seed, yaw, rng.random_range(0.7..1.3), size);
            spec.jitter = jitter(&mut rng, cfg.jitter);
            let path = dir.join(FACE_IMAGES).join(format!("{}_{k:03}.png", identity_name(i)));
            jobs.push(Job { spec, path });
        }
    }
    let rendered = render_all(&jobs)?;
    let records = jobs
        .iter()
        .zip(&rendered)
        .enumerate()
        .map(|(n, (job, face))| face_record(n / cfg.faces_per_identity.max(1), &job.path, face))
        .collect::<Result<Vec<_>>>()?;
    write_faces(&dir.join(FACES), &records)?;

    // Test split: a 0° gallery image plus one probe per test pose.
    let mut jobs = Vec::new();
    let mut test_ids = Vec::new();
    let test_yaws: Vec<f64> = std::iter::once(0.0).chain(cfg.test_poses.iter().copied()).collect();
    for (i, &seed) in identity_seeds.iter().enumerate() {
        for &yaw in &test_yaws {
            let mut spec = SyntheticFaceSpec::new(seed, yaw, rng.random_range(0.7..1.3), size);
            spec.jitter = jitter(&mut rng, cfg.jitter);
            let name = if jobs.len() % test_yaws.len() == 0 { "g" } else { "q" };
            let path = dir
                .join(TEST_IMAGES)
                .join(format!("{}_{name}_{}.png", identity_name(i), pose_tag(yaw)));
            jobs.push(Job { spec, path });
            test_ids.push(i);
        }
    }
    let rendered = render_all(&jobs)?;
    let test_records = jobs
        .iter()
        .zip(&rendered)
        .zip(&test_ids)
        .map(|((job, face), &i)| face_record(i, &job.path, face))
        .collect::<Result<Vec<_>>>()?;
    write_faces(&dir.join(TEST_FACES), &test_records)?;

    let stride = test_yaws.len();
    let mut gallery = IdentityGallery::default();
    let mut probes = IdentityGallery::default();
    for (n, r) in test_records.iter().enumerate() {
        let entry = GalleryEntry {
            id: r.id.clone(),
            path: r.path.clone(),
            yaw_deg: r.yaw_deg.round() as i32,
        };
        if n % stride == 0 {
            gallery.entries.push(entry);
        } else {
            probes.entries.push(entry);
        }
    }
    write_gallery(&dir.join(GALLERY), &gallery)?;
    write_gallery(&dir.join(PROBES), &probes)?;

    // Balanced gallery-vs-probe verification pairs: each probe once against
    // its own identity and once against a random other identity. The two
    // stay adjacent so every contiguous verification fold is balanced to
    // within one pair.
    let mut couples = Vec::new();
    for (n, r) in test_records.iter().enumerate() {
        if n % stride == 0 {
            continue;
        }
        let own = r.label;
        let mut other = rng.random_range(0..cfg.n_identities - 1);
        if other >= own {
            other += 1;
        }
        let mut couple = [(own, true), (other, false)].map(|(g, same)| {
            (
                TestPair {
                    path_a: test_records[g * stride].path.clone(),
                    path_b: r.path.clone(),
                    same_identity: same,
                },
                PairPoses {
                    a: Some(PoseAngles { pitch: 0.0, yaw: 0.0, roll: 0.0 }),
                    b: Some(PoseAngles { pitch: 0.0, yaw: r.yaw_deg, roll: 0.0 }),
                },
            )
        });
        if rng.random::<bool>() {
            couple.swap(0, 1);
        }
        couples.push(couple);
    }
    couples.shuffle(&mut rng);
    let test_pairs: Vec<_> = couples.into_iter().flatten().collect();
    let (test_pairs, poses): (Vec<_>, Vec<_>) = test_pairs.into_iter().unzip();
    write_test_pairs(&dir.join(TEST_PAIRS), &test_pairs)?;
    write_pair_poses(&dir.join(TEST_PAIR_POSES), &poses)?;

    let digest = directory_digest(dir)?;
    let info = serde_json::json!({ "config": cfg, "digest": digest });
    write_bytes(&dir.join(INFO), serde_json::to_string_pretty(&info)?.as_bytes())?;
    Ok(SyntheticDataset {
        digest,
        ..SyntheticDataset::at(dir)
    })
}

/// SHA-256 over every file below `dir` (relative path and contents, in
/// sorted path order), excluding the dataset info file.
pub fn directory_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        if rel == Path::new(layout::INFO) {
            continue;
        }
        let bytes = fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LandmarkName;

    fn count_png(dir: &Path) -> usize {
        fs::read_dir(dir)
            .map(|rd| rd.filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count())
            .unwrap_or(0)
    }

    #[test]
    fn two_identities_two_poses() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = SyntheticDatasetConfig::new(2, &[0.0, 90.0], 5);
        cfg.render_size = 64;
        let ds = build_synthetic_dataset(tmp.path(), &cfg).unwrap();
        assert_eq!(count_png(&tmp.path().join(layout::PAIR_IMAGES)), 4);
        let recs = load_pair_manifest(&ds.pair_manifest).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.profile_landmarks.contains(LandmarkName::EarPoint)));
    }

    #[test]
    fn same_seed_same_digest() {
        let mut cfg = SyntheticDatasetConfig::new(3, &[0.0, -75.0], 11);
        cfg.render_size = 48;
        cfg.faces_per_identity = 2;
        cfg.test_poses = vec![45.0];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let da = build_synthetic_dataset(a.path(), &cfg).unwrap();
        let db = build_synthetic_dataset(b.path(), &cfg).unwrap();
        assert_eq!(da.digest, db.digest);
        cfg.seed = 12;
        let c = tempfile::tempdir().unwrap();
        assert_ne!(build_synthetic_dataset(c.path(), &cfg).unwrap().digest, da.digest);
    }

    #[test]
    fn test_split_is_balanced_with_one_frontal_per_identity() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = SyntheticDatasetConfig::new(4, &[0.0], 2);
        cfg.render_size = 48;
        cfg.test_poses = vec![-90.0, 30.0, 90.0];
        let ds = build_synthetic_dataset(tmp.path(), &cfg).unwrap();
        let pairs = load_test_pairs(&ds.test_pairs).unwrap();
        assert_eq!(pairs.len(), 2 * 4 * 3);
        assert_eq!(pairs.iter().filter(|p| p.same_identity).count(), pairs.len() / 2);
        for k in 0..10 {
            let fold = &pairs[k * pairs.len() / 10..(k + 1) * pairs.len() / 10];
            let pos = fold.iter().filter(|p| p.same_identity).count() as i64;
            assert!((2 * pos - fold.len() as i64).abs() <= 2, "fold {k} unbalanced");
        }
        let gallery = load_gallery(&ds.gallery).unwrap();
        assert_eq!(gallery.entries.len(), 4);
        assert!(gallery.entries.iter().all(|e| e.yaw_deg == 0));
        assert_eq!(load_gallery(&ds.probes).unwrap().entries.len(), 12);
        assert_eq!(load_pair_poses(&ds.test_pair_poses).unwrap().len(), pairs.len());
    }

    #[test]
    fn too_few_identities_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = SyntheticDatasetConfig::new(1, &[0.0], 0);
        assert!(build_synthetic_dataset(tmp.path(), &cfg).is_err());
    }
}
