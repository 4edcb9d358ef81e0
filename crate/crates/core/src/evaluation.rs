//! Verification, identification and inference-speed protocols.
//!
//! Protocols take precomputed embeddings keyed by image path, so embedding
//! extraction can be batched and parallelized independently.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{GalleryEntry, PairPoses, TestPair};
use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 10;

/// Yaw bins of the identification table.
pub const POSE_BINS: [u32; 6] = [15, 30, 45, 60, 75, 90];

pub type Embeddings = HashMap<PathBuf, Vec<f64>>;

/// Dot product of two unit-norm vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lookup<'a>(emb: &'a Embeddings, path: &Path) -> Result<&'a [f64]> {
    emb.get(path)
        .map(|v| v.as_slice())
        .ok_or_else(|| Error::EmbeddingFailure {
            path: path.to_path_buf(),
            message: "no embedding computed".into(),
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub fold_accuracies: Vec<f64>,
    pub fold_thresholds: Vec<f64>,
    pub fold_sizes: Vec<usize>,
    /// Fold accuracies weighted by fold size.
    pub mean_accuracy: f64,
}

/// Fold `i` is the contiguous slice `i`; the last fold takes the remainder.
pub fn fold_bounds(n: usize) -> Vec<(usize, usize)> {
    let size = n / NUM_FOLDS;
    (0..NUM_FOLDS)
        .map(|i| {
            let hi = if i + 1 == NUM_FOLDS { n } else { (i + 1) * size };
            (i * size, hi)
        })
        .collect()
}

/// Threshold maximizing training accuracy for the rule `score > t`.
/// Candidates are the midpoints of the sorted unique scores plus one value
/// below and one above the range; the smallest optimal candidate wins.
pub fn best_threshold(scores: &[f64], same: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = same.iter().filter(|s| **s).count();
    // Threshold below everything: all predicted same.
    let mut correct = positives as i64;
    let mut best = (correct, scores[order[0]] - 1.0);
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            correct += if same[order[i]] { -1 } else { 1 };
            i += 1;
        }
        let t = if i < order.len() { 0.5 * (v + scores[order[i]]) } else { v + 1.0 };
        if correct > best.0 {
            best = (correct, t);
        }
    }
    best.1
}

pub fn verify_scores(scores: &[f64], same: &[bool]) -> Result<VerificationResult> {
    if scores.len() != same.len() {
        return Err(Error::shape(format!("{} labels", scores.len()), same.len()));
    }
    if scores.len() < NUM_FOLDS {
        return Err(Error::EmptyInput(format!(
            "{} pairs cannot form {NUM_FOLDS} folds",
            scores.len()
        )));
    }
    let mut res = VerificationResult {
        fold_accuracies: Vec::new(),
        fold_thresholds: Vec::new(),
        fold_sizes: Vec::new(),
        mean_accuracy: 0.0,
    };
    let mut correct_total = 0usize;
    for (lo, hi) in fold_bounds(scores.len()) {
        let (mut tr_s, mut tr_l) = (Vec::new(), Vec::new());
        for i in (0..lo).chain(hi..scores.len()) {
            tr_s.push(scores[i]);
            tr_l.push(same[i]);
        }
        let t = best_threshold(&tr_s, &tr_l);
        let correct = (lo..hi).filter(|&i| (scores[i] > t) == same[i]).count();
        correct_total += correct;
        res.fold_accuracies.push(correct as f64 / (hi - lo) as f64);
        res.fold_thresholds.push(t);
        res.fold_sizes.push(hi - lo);
    }
    res.mean_accuracy = correct_total as f64 / scores.len() as f64;
    Ok(res)
}

/// Ten-fold verification accuracy over `pairs` in file order.
pub fn verify_10fold(pairs: &[TestPair], embeddings: &Embeddings) -> Result<VerificationResult> {
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        scores.push(cosine_similarity(lookup(embeddings, &p.path_a)?, lookup(embeddings, &p.path_b)?));
    }
    let same: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
    verify_scores(&scores, &same)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinResult {
    pub accuracy: f64,
    pub probes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationResult {
    /// Keyed by `|yaw|` in degrees.
    pub per_pose_bin: BTreeMap<u32, BinResult>,
    /// Standard bins without probes; excluded from `average`.
    pub empty_bins: Vec<u32>,
    /// Unweighted mean over non-empty bins.
    pub average: f64,
}

/// Nearest-gallery top-1 accuracy per `|yaw|` bin.
pub fn identify_top1(
    gallery: &[GalleryEntry],
    probes: &[GalleryEntry],
    embeddings: &Embeddings,
) -> Result<IdentificationResult> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::EmptyInput("identification needs a gallery and probes".into()));
    }
    let mut ids = HashSet::new();
    for g in gallery {
        if !ids.insert(g.id.as_str()) {
            return Err(Error::DuplicateGalleryIdentity(g.id.clone()));
        }
    }
    let gal: Vec<&[f64]> = gallery
        .iter()
        .map(|g| lookup(embeddings, &g.path))
        .collect::<Result<_>>()?;
    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for p in probes {
        let e = lookup(embeddings, &p.path)?;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, g) in gal.iter().enumerate() {
            let s = cosine_similarity(e, g);
            if s > best.0 {
                best = (s, j);
            }
        }
        let entry = hits.entry(p.yaw_deg.unsigned_abs()).or_default();
        entry.1 += 1;
        if gallery[best.1].id == p.id {
            entry.0 += 1;
        }
    }
    let per_pose_bin: BTreeMap<u32, BinResult> = hits
        .into_iter()
        .map(|(k, (h, n))| {
            (
                k,
                BinResult {
                    accuracy: h as f64 / n as f64,
                    probes: n,
                },
            )
        })
        .collect();
    let empty_bins: Vec<u32> = POSE_BINS.iter().copied().filter(|b| !per_pose_bin.contains_key(b)).collect();
    for b in &empty_bins {
        log::warn!("identification bin {b} has no probes");
    }
    let average = per_pose_bin.values().map(|b| b.accuracy).sum::<f64>() / per_pose_bin.len() as f64;
    Ok(IdentificationResult {
        per_pose_bin,
        empty_bins,
        average,
    })
}

/// The per-pose table as CSV with a header row and a trailing average.
pub fn identification_csv(r: &IdentificationResult) -> String {
    let mut out = String::from("yaw_deg,probes,top1\n");
    for (yaw, b) in &r.per_pose_bin {
        out.push_str(&format!("{yaw},{},{:.6}\n", b.probes, b.accuracy));
    }
    out.push_str(&format!("average,,{:.6}\n", r.average));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseStats {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub pairs: usize,
}

/// Per-axis mean absolute angle difference over annotated pairs.
pub fn pose_pair_stats(poses: &[PairPoses]) -> Result<PoseStats> {
    if poses.is_empty() {
        return Err(Error::EmptyInput("no pose-annotated pairs".into()));
    }
    let mut acc = [0.0; 3];
    for (i, p) in poses.iter().enumerate() {
        let (a, b) = match (&p.a, &p.b) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::MissingAnnotation(i)),
        };
        acc[0] += (a.pitch - b.pitch).abs();
        acc[1] += (a.yaw - b.yaw).abs();
        acc[2] += (a.roll - b.roll).abs();
    }
    let n = poses.len() as f64;
    Ok(PoseStats {
        pitch: acc[0] / n,
        yaw: acc[1] / n,
        roll: acc[2] / n,
        pairs: poses.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub cpu_model: Option<String>,
    pub device: String,
}

impl HardwareInfo {
    pub fn detect(device: &str) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        });
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            cpu_model,
            device: device.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineTiming {
    pub name: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub warmup: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub hardware: HardwareInfo,
    pub pipelines: Vec<PipelineTiming>,
}

impl BenchmarkResult {
    /// `mean(a) / mean(b)` for two named pipelines.
    pub fn ratio(&self, a: &str, b: &str) -> Option<f64> {
        let m = |n: &str| self.pipelines.iter().find(|p| p.name == n).map(|p| p.mean_ms);
        Some(m(a)? / m(b)?)
    }
}

pub const MIN_WARMUP: usize = 10;
pub const MIN_ITERATIONS: usize = 100;

pub type Pipeline<'a> = (String, Box<dyn FnMut() -> Result<()> + 'a>);

/// Serial per-image latency of each pipeline. Every call must finish its
/// work before returning; CPU tensors are synchronous.
pub fn benchmark_inference(
    pipelines: Vec<Pipeline<'_>>,
    warmup: usize,
    iterations: usize,
    hardware: HardwareInfo,
) -> Result<BenchmarkResult> {
    if warmup < MIN_WARMUP || iterations < MIN_ITERATIONS {
        return Err(Error::ConfigInvalid(format!(
            "benchmark needs >= {MIN_WARMUP} warmup and >= {MIN_ITERATIONS} timed runs"
        )));
    }
    let mut out = Vec::new();
    for (name, mut run) in pipelines {
        for _ in 0..warmup {
            run().map_err(|e| Error::PipelineLoadFailure(format!("{name}: {e}")))?;
        }
        let mut ms = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let t = Instant::now();
            run()?;
            ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let mean = ms.iter().sum::<f64>() / ms.len() as f64;
        let var = ms.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (ms.len() - 1) as f64;
        out.push(PipelineTiming {
            name,
            mean_ms: mean,
            std_ms: var.sqrt(),
            warmup,
            iterations,
        });
    }
    Ok(BenchmarkResult {
        hardware,
        pipelines: out,
    })
}
