//! Experiment stages over one run directory. Every stage reads only what
//! earlier stages wrote below the same root, so the command sequence
//! `synth, align, calibrate, train-defront, train-embed, eval` is the whole
//! experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::augmentation::{calibration_report, CalibrationReport, Defrontalizer, ErrorCache};
use crate::config::ExperimentConfig;
use crate::data::{
    build_synthetic_dataset, load_faces, load_gallery, load_pair_manifest, load_pair_poses, load_test_pairs,
    read_json, write_json, FaceRecord, SyntheticDataset, TestPair,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    benchmark_inference, identification_csv, identify_top1, pose_pair_stats, verify_10fold, BenchmarkResult,
    Embeddings, HardwareInfo, IdentificationResult, Pipeline, PoseStats, VerificationResult,
};
use crate::geometry::{alignment_error, HalfSide};
use crate::image::{batch_tensor, Image};
use crate::nets::{flow_param_count, DefrontModel};
use crate::training::{
    pretrain_flows, prepare_faces, prepare_pairs, train_defront as run_defront_training, train_embeddings,
    DefrontTrainReport, DefrontTrainer, EmbedModel, EpochSummary, FaceSample, FlowPair, FlowPretrainReport,
    MetricsLog,
};

/// Images per forward pass when extracting embeddings.
const EMBED_BATCH: usize = 32;

/// File layout of one experiment run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> SyntheticDataset {
        SyntheticDataset::at(&self.root.join("data"))
    }

    pub fn aligned(&self) -> PathBuf {
        self.root.join("aligned")
    }

    pub fn faces_aligned(&self) -> PathBuf {
        self.root.join("faces_aligned")
    }

    pub fn errors(&self) -> PathBuf {
        self.root.join("errors.json")
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn flows_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("flows.ckpt")
    }

    pub fn defront_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("defront.ckpt")
    }

    pub fn embed_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("embed.ckpt")
    }

    pub fn defrontalized(&self) -> PathBuf {
        self.root.join("defrontalized")
    }

    pub fn metrics(&self, stage: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{stage}.jsonl"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
}

pub fn parse_device(name: &str) -> Result<Device> {
    match name {
        "cpu" => Ok(Device::Cpu),
        other => Err(Error::ConfigInvalid(format!(
            "device `{other}` is not available in this build; use `cpu`"
        ))),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// A fresh metrics file for `stage`; reruns overwrite rather than append.
fn fresh_metrics(run: &RunDir, stage: &str) -> Result<MetricsLog> {
    let path = run.metrics(stage);
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }
    MetricsLog::to_file(&path)
}

pub fn synth(cfg: &ExperimentConfig, run: &RunDir) -> Result<SyntheticDataset> {
    build_synthetic_dataset(&run.dataset().dir, &cfg.synthetic_dataset())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub pairs: usize,
    pub faces: usize,
    pub test_faces: usize,
    pub mean_error: f64,
    pub max_error: f64,
}

/// Align every pair and face. Pairs are written as
/// `aligned/<profile stem>_{frontal_half,profile}.png`, faces as
/// `faces_aligned/<stem>.png`; training-face alignment errors go to the
/// error cache.
pub fn align(cfg: &ExperimentConfig, run: &RunDir) -> Result<AlignSummary> {
    let ds = run.dataset();
    let template = cfg.geometry.template();
    let records = load_pair_manifest(&ds.pair_manifest)?;
    let pairs = prepare_pairs(&records, &template)?;
    let dir = run.aligned();
    for (r, p) in records.iter().zip(&pairs) {
        let stem = file_stem(&r.profile_path);
        p.frontal_half.save_png(&dir.join(format!("{stem}_frontal_half.png")))?;
        p.profile.save_png(&dir.join(format!("{stem}_profile.png")))?;
    }
    let faces = prepare_faces(&load_faces(&ds.faces)?, &template)?;
    let tests = prepare_faces(&load_faces(&ds.test_faces)?, &template)?;
    let dir = run.faces_aligned();
    for f in faces.iter().chain(&tests) {
        f.face.image.save_png(&dir.join(format!("{}.png", file_stem(&f.path))))?;
    }
    let mut cache = ErrorCache::new(&template);
    for f in &faces {
        cache.errors.insert(f.path.clone(), f.error);
    }
    cache.save(&run.errors())?;
    let errors: Vec<f64> = faces.iter().map(|f| f.error).collect();
    Ok(AlignSummary {
        pairs: pairs.len(),
        faces: faces.len(),
        test_faces: tests.len(),
        mean_error: errors.iter().sum::<f64>() / errors.len().max(1) as f64,
        max_error: errors.iter().copied().fold(0.0, f64::max),
    })
}

/// Training-face alignment errors, from the cache when it matches the
/// template, otherwise recomputed from the landmarks.
pub fn training_errors(cfg: &ExperimentConfig, run: &RunDir) -> Result<Vec<f64>> {
    let template = cfg.geometry.template();
    let records = load_faces(&run.dataset().faces)?;
    let cache = ErrorCache::load_for(&run.errors(), &template)?;
    records
        .iter()
        .map(|r| match cache.as_ref().and_then(|c| c.get(&r.path)) {
            Some(e) => Ok(e),
            None => alignment_error(&r.landmarks()?, &template),
        })
        .collect()
}

pub fn calibrate(cfg: &ExperimentConfig, run: &RunDir) -> Result<CalibrationReport> {
    let errors = training_errors(cfg, run)?;
    let report = calibration_report(
        &errors,
        cfg.augmentation.target_fraction,
        cfg.augmentation.apply_probability,
    )?;
    for w in &report.warnings {
        log::warn!("calibration: {w}");
    }
    write_json(&run.calibration(), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefrontRunReport {
    pub flow_params: usize,
    pub flows: FlowPretrainReport,
    pub defront: DefrontTrainReport,
}

/// Flow pretraining followed by defrontalization training. Writes the
/// pretrained flows, one checkpoint per epoch and the final model.
pub fn train_defront(cfg: &ExperimentConfig, run: &RunDir, device: &Device) -> Result<DefrontRunReport> {
    let echo = cfg.to_toml();
    let ds = run.dataset();
    require(&ds.pair_manifest)?;
    let pairs = prepare_pairs(&load_pair_manifest(&ds.pair_manifest)?, &cfg.geometry.template())?;
    let flows = FlowPair::new(&cfg.nets.flow, DType::F32, device, cfg.seed)?;
    let mut metrics = fresh_metrics(run, "flows")?;
    let flow_report = pretrain_flows(&pairs, &cfg.flow_config(), &flows, &mut metrics)?;
    flows.checkpoint(flow_report.steps, &echo).save(&run.flows_checkpoint())?;
    log::info!(
        "flow photometric loss {:.4} -> {:.4}",
        flow_report.initial_photometric,
        flow_report.final_photometric
    );

    let mut trainer = DefrontTrainer::new(&cfg.nets, &cfg.defront_config(), flows, &echo)?;
    let mut metrics = fresh_metrics(run, "defront")?;
    let report = run_defront_training(&mut trainer, &pairs, &mut metrics, Some(&run.checkpoints()))?;
    trainer.checkpoint()?.save(&run.defront_checkpoint())?;
    let out = DefrontRunReport {
        flow_params: flow_param_count(&cfg.nets.flow)?,
        flows: flow_report,
        defront: report,
    };
    write_json(&run.report("train_defront.json"), &out)?;
    Ok(out)
}

pub fn load_defront(cfg: &ExperimentConfig, run: &RunDir, device: &Device) -> Result<DefrontModel> {
    let path = run.defront_checkpoint();
    require(&path)?;
    DefrontModel::load(&path, &cfg.nets, device)
}

/// Both-side defrontalizations of the first `limit` training faces, for
/// inspection.
pub fn defrontalize(cfg: &ExperimentConfig, run: &RunDir, device: &Device, limit: usize) -> Result<Vec<PathBuf>> {
    let model = Defrontalizer::new(load_defront(cfg, run, device)?);
    let records: Vec<FaceRecord> = load_faces(&run.dataset().faces)?.into_iter().take(limit).collect();
    let faces = prepare_faces(&records, &cfg.geometry.template())?;
    let mut written = Vec::new();
    for f in &faces {
        let stem = file_stem(&f.path);
        let items = [(&f.face, HalfSide::Left), (&f.face, HalfSide::Right)];
        for ((_, side), out) in items.iter().zip(model.apply_batch(&items)?) {
            let tag = match side {
                HalfSide::Left => "left",
                HalfSide::Right => "right",
            };
            let path = run.defrontalized().join(format!("{stem}_{tag}.png"));
            out.image.save_png(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedRunReport {
    pub threshold: f64,
    pub epochs: Vec<EpochSummary>,
    pub steps: u64,
    pub final_lr: f64,
    pub defront_fingerprint: Option<String>,
}

/// Embedding training with the calibrated augmentation policy. A zero
/// threshold trains the baseline and needs no defrontalization model.
pub fn train_embed(cfg: &ExperimentConfig, run: &RunDir, device: &Device) -> Result<EmbedRunReport> {
    require(&run.calibration())?;
    let calibration: CalibrationReport = read_json(&run.calibration())?;
    train_embed_with_threshold(cfg, run, device, calibration.threshold)
}

pub fn train_embed_with_threshold(
    cfg: &ExperimentConfig,
    run: &RunDir,
    device: &Device,
    threshold: f64,
) -> Result<EmbedRunReport> {
    let ds = run.dataset();
    let template = cfg.geometry.template();
    let faces = prepare_faces(&load_faces(&ds.faces)?, &template)?;
    let eval_paths: Vec<PathBuf> = load_faces(&ds.test_faces)?.into_iter().map(|r| r.path).collect();
    let defront = if threshold > 0.0 {
        Defrontalizer::new(load_defront(cfg, run, device)?)
    } else {
        Defrontalizer::empty()
    };
    let mut metrics = fresh_metrics(run, "embed")?;
    let result = train_embeddings(
        &faces,
        &cfg.embed_config(cfg.policy(Some(threshold))),
        &cfg.nets.backbone,
        &defront,
        &eval_paths,
        DType::F32,
        device,
        &mut metrics,
    )?;
    result.model.checkpoint(result.steps, &cfg.to_toml()).save(&run.embed_checkpoint())?;
    let report = EmbedRunReport {
        threshold,
        epochs: result.epochs,
        steps: result.steps,
        final_lr: result.lr_trace.last().copied().unwrap_or(0.0),
        defront_fingerprint: result.defront_fingerprint,
    };
    write_json(&run.report("train_embed.json"), &report)?;
    Ok(report)
}

/// Unit-norm embeddings of aligned faces keyed by source path. With `flip`
/// the embeddings of an image and its mirror are summed and renormalized.
pub fn embed_faces(model: &EmbedModel, faces: &[FaceSample], flip: bool) -> Result<Embeddings> {
    let dtype = model.store.dtype();
    let device = model.store.device().clone();
    let mut out = Embeddings::new();
    for chunk in faces.chunks(EMBED_BATCH) {
        let imgs: Vec<&Image> = chunk.iter().map(|f| &f.face.image).collect();
        let mut e = model.embed(&batch_tensor(&imgs, dtype, &device)?)?;
        if flip {
            let mirrored: Vec<Image> = imgs.iter().map(|i| i.mirror_horizontal()).collect();
            let refs: Vec<&Image> = mirrored.iter().collect();
            e = (e + model.embed(&batch_tensor(&refs, dtype, &device)?)?)?;
            e = crate::nets::l2_normalize(&e)?;
        }
        let rows = e.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for (f, row) in chunk.iter().zip(rows) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::EmbeddingFailure {
                    path: f.path.clone(),
                    message: "non-finite embedding".into(),
                });
            }
            out.insert(f.path.clone(), row);
        }
    }
    Ok(out)
}

pub fn load_embed(cfg: &ExperimentConfig, run: &RunDir, device: &Device) -> Result<EmbedModel> {
    let path = run.embed_checkpoint();
    require(&path)?;
    EmbedModel::load(&path, &cfg.nets.backbone, device)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub verification: VerificationResult,
    /// Verification restricted to pairs whose probe has this `|yaw|`.
    pub verification_by_yaw: BTreeMap<u32, VerificationResult>,
    pub identification: IdentificationResult,
    pub pose_stats: PoseStats,
}

/// Verification restricted to probes at each `|yaw|`; bins with fewer
/// pairs than folds are skipped.
pub fn verification_by_yaw(
    pairs: &[TestPair],
    probe_yaws: &[f64],
    embeddings: &Embeddings,
) -> Result<BTreeMap<u32, VerificationResult>> {
    let mut bins: BTreeMap<u32, Vec<TestPair>> = BTreeMap::new();
    for (p, y) in pairs.iter().zip(probe_yaws) {
        bins.entry(y.abs().round() as u32).or_default().push(p.clone());
    }
    bins.into_iter()
        .filter(|(_, v)| v.len() >= crate::evaluation::NUM_FOLDS)
        .map(|(k, v)| Ok((k, verify_10fold(&v, embeddings)?)))
        .collect()
}

pub fn evaluate(cfg: &ExperimentConfig, run: &RunDir, device: &Device) -> Result<EvalReport> {
    let model = load_embed(cfg, run, device)?;
    let ds = run.dataset();
    let tests = prepare_faces(&load_faces(&ds.test_faces)?, &cfg.geometry.template())?;
    let emb = embed_faces(&model, &tests, cfg.evaluation.flip)?;
    let pairs = load_test_pairs(&ds.test_pairs)?;
    let poses = load_pair_poses(&ds.test_pair_poses)?;
    if poses.len() != pairs.len() {
        return Err(Error::InvalidState(format!(
            "{} pose annotations for {} test pairs",
            poses.len(),
            pairs.len()
        )));
    }
    let probe_yaws = poses
        .iter()
        .enumerate()
        .map(|(i, p)| p.b.map(|b| b.yaw).ok_or(Error::MissingAnnotation(i)))
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        verification: verify_10fold(&pairs, &emb)?,
        verification_by_yaw: verification_by_yaw(&pairs, &probe_yaws, &emb)?,
        identification: identify_top1(
            &load_gallery(&ds.gallery)?.entries,
            &load_gallery(&ds.probes)?.entries,
            &emb,
        )?,
        pose_stats: pose_pair_stats(&poses)?,
    };
    write_json(&run.report("verification.json"), &report.verification)?;
    write_json(&run.report("verification_by_yaw.json"), &report.verification_by_yaw)?;
    write_json(&run.report("identification.json"), &report.identification)?;
    write_json(&run.report("pose_stats.json"), &report.pose_stats)?;
    if cfg.evaluation.csv {
        let path = run.report("identification.csv");
        std::fs::write(&path, identification_csv(&report.identification)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

pub const EMBED_ONLY: &str = "embed";
pub const DEFRONT_EMBED: &str = "defront+embed";

/// Per-image latency of embedding an aligned face against synthesizing a
/// profile from it first and embedding the result.
pub fn bench_models(
    face: &FaceSample,
    embed: &EmbedModel,
    defront: &Defrontalizer,
    warmup: usize,
    iterations: usize,
    device_name: &str,
) -> Result<BenchmarkResult> {
    let dtype = embed.store.dtype();
    let device = embed.store.device().clone();
    let x = face.face.image.to_tensor(dtype, &device)?;
    let run_embed = |x: &Tensor| -> Result<()> {
        embed.embed(x)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(())
    };
    let pipelines: Vec<Pipeline<'_>> = vec![
        (EMBED_ONLY.to_string(), Box::new(|| run_embed(&x))),
        (
            DEFRONT_EMBED.to_string(),
            Box::new(|| {
                let out = defront.apply_batch(&[(&face.face, HalfSide::Left)])?.remove(0);
                run_embed(&out.image.to_tensor(dtype, &device)?)
            }),
        ),
    ];
    benchmark_inference(pipelines, warmup, iterations, HardwareInfo::detect(device_name))
}

pub fn bench(cfg: &ExperimentConfig, run: &RunDir, device: &Device, device_name: &str) -> Result<BenchmarkResult> {
    let embed = load_embed(cfg, run, device)?;
    let defront = Defrontalizer::new(load_defront(cfg, run, device)?);
    let records: Vec<FaceRecord> = load_faces(&run.dataset().test_faces)?.into_iter().take(1).collect();
    let face = prepare_faces(&records, &cfg.geometry.template())?
        .pop()
        .ok_or(Error::DataEmpty)?;
    let result = bench_models(
        &face,
        &embed,
        &defront,
        cfg.evaluation.warmup,
        cfg.evaluation.iterations,
        device_name,
    )?;
    if let Some(r) = result.ratio(DEFRONT_EMBED, EMBED_ONLY) {
        log::info!("defront+embed / embed latency ratio {r:.2}");
    }
    write_json(&run.report("benchmark.json"), &result)?;
    Ok(result)
}
