//! Margin-softmax training of the embedding backbone with defrontalization
//! augmentation and gradient accumulation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::metrics::MetricsLog;
use super::optim::{accumulate, collect_grads, Grads, Sgd, SgdConfig};
use super::poly_lr;
use super::samples::{assert_disjoint, epoch_order, FaceSample};
use crate::augmentation::{decide_epoch, AugmentationDecision, AugmentationPolicy, Defrontalizer};
use crate::error::{Error, Result};
use crate::geometry::AlignedFace;
use crate::image::{batch_tensor, Image};
use crate::losses::{margin_softmax_loss, MarginConfig};
use crate::nets::{l2_normalize, Backbone, BackboneConfig, Checkpoint, Init, Mode, ParamStore};

pub const BACKBONE_SECTION: &str = "backbone";
pub const HEAD_SECTION: &str = "head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedTrainConfig {
    pub lr0: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub margin_scale: f64,
    pub margin: f64,
    pub policy: AugmentationPolicy,
    pub seed: u64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            power: 1.0,
            weight_decay: 5e-4,
            momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            accumulation_steps: 32,
            margin_scale: 64.0,
            margin: 0.5,
            policy: AugmentationPolicy::default(),
            seed: 0,
        }
    }
}

impl EmbedTrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }

    pub fn margin_config(&self, num_classes: usize) -> MarginConfig {
        MarginConfig {
            scale: self.margin_scale,
            margin: self.margin,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(Error::ConfigInvalid(
                "embedding training needs epochs, batch_size and accumulation_steps >= 1".into(),
            ));
        }
        if !(self.lr0 > 0.0) || !(self.power > 0.0) {
            return Err(Error::ConfigInvalid(format!("invalid lr schedule {} / {}", self.lr0, self.power)));
        }
        Ok(())
    }
}

/// Backbone plus the class-center matrix of the margin head.
pub struct EmbedModel {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head_store: ParamStore,
    pub head: Tensor,
}

impl EmbedModel {
    pub fn new(cfg: &BackboneConfig, num_classes: usize, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device, seed);
        let backbone = Backbone::new(&mut store, cfg)?;
        let mut head_store = ParamStore::new(dtype, device, seed.wrapping_add(1));
        let head = head_store.param("centers", &[num_classes, cfg.embedding_dim], Init::Normal(0.01))?;
        Ok(Self {
            store,
            backbone,
            head_store,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.dim(0).expect("rank-2 head")
    }

    /// Every trainable parameter, namespaced by section.
    pub fn params(&self) -> Vec<(String, Var)> {
        let b = self.store.trainable().into_iter().map(|(k, v)| (format!("{BACKBONE_SECTION}/{k}"), v));
        let h = self.head_store.trainable().into_iter().map(|(k, v)| (format!("{HEAD_SECTION}/{k}"), v));
        b.chain(h).collect()
    }

    pub fn loss(&self, x: &Tensor, labels: &[usize], margin: &MarginConfig, mode: Mode) -> Result<Tensor> {
        let e = self.backbone.forward(x, mode)?;
        let w = l2_normalize(&self.head)?;
        margin_softmax_loss(&e, &w, labels, margin)
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.forward(x, Mode::Eval)
    }

    pub fn checkpoint(&self, step: u64, config: &str) -> Checkpoint {
        Checkpoint::new("embedding", step, config)
            .with_store(BACKBONE_SECTION, &self.store)
            .with_store(HEAD_SECTION, &self.head_store)
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &BackboneConfig, device: &Device) -> Result<Self> {
        let head = ck
            .tensors
            .get(&format!("{HEAD_SECTION}/param/centers"))
            .ok_or_else(|| Error::InvalidState("embedding checkpoint lacks the margin head".into()))?;
        let model = Self::new(cfg, head.dim(0)?, head.dtype(), device, 0)?;
        model.store.import(&ck.section(BACKBONE_SECTION))?;
        model.head_store.import(&ck.section(HEAD_SECTION))?;
        Ok(model)
    }

    pub fn load(path: &Path, cfg: &BackboneConfig, device: &Device) -> Result<Self> {
        let ck = Checkpoint::load(path, device)?;
        Self::from_checkpoint(&ck, cfg, device).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Gradients of the mean loss over the union of `micro_batches`, computed
/// one micro-batch at a time with each loss scaled by `1 / len`. Equals
/// the single-batch gradient when the micro-batches have equal size and
/// normalization is frozen.
pub fn accumulated_gradients(
    model: &EmbedModel,
    micro_batches: &[(Tensor, Vec<usize>)],
    margin: &MarginConfig,
    mode: Mode,
) -> Result<(Grads, f64)> {
    let params = model.params();
    let scale = 1.0 / micro_batches.len() as f64;
    let mut acc = Grads::new();
    let mut loss_sum = 0.0;
    for (x, labels) in micro_batches {
        let loss = (model.loss(x, labels, margin, mode)? * scale)?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                name: "margin_softmax".into(),
                step: 0,
                value: v,
            });
        }
        loss_sum += v;
        accumulate(&mut acc, collect_grads(&loss.backward()?, &params)?)?;
    }
    Ok((acc, loss_sum))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub augmented_fraction: f64,
    pub images: usize,
}

pub struct EmbedTrainResult {
    pub model: EmbedModel,
    pub epochs: Vec<EpochSummary>,
    pub lr_trace: Vec<f64>,
    pub steps: u64,
    pub defront_fingerprint: Option<String>,
}

/// Images of one micro-batch after augmentation, and how many were
/// replaced.
fn micro_batch_images(
    faces: &[FaceSample],
    idx: &[usize],
    decisions: &[AugmentationDecision],
    defront: &Defrontalizer,
) -> Result<(Vec<Image>, usize)> {
    let mut images: Vec<Image> = Vec::with_capacity(idx.len());
    let mut todo: Vec<(usize, &AlignedFace, crate::geometry::HalfSide)> = Vec::new();
    for (slot, &i) in idx.iter().enumerate() {
        if let AugmentationDecision::Defrontalize(side) = decisions[i] {
            todo.push((slot, &faces[i].face, side));
        }
        images.push(faces[i].face.image.clone());
    }
    let items: Vec<(&AlignedFace, crate::geometry::HalfSide)> = todo.iter().map(|(_, f, s)| (*f, *s)).collect();
    for ((slot, _, _), out) in todo.iter().zip(defront.apply_batch(&items)?) {
        images[*slot] = out.image;
    }
    Ok((images, todo.len()))
}

/// Train a backbone on `faces`. `eval_paths` must not intersect the
/// training images; the defrontalization model is checked to be unchanged.
pub fn train_embeddings(
    faces: &[FaceSample],
    cfg: &EmbedTrainConfig,
    backbone_cfg: &BackboneConfig,
    defront: &Defrontalizer,
    eval_paths: &[PathBuf],
    dtype: DType,
    device: &Device,
    metrics: &mut MetricsLog,
) -> Result<EmbedTrainResult> {
    cfg.validate()?;
    if faces.is_empty() {
        return Err(Error::DataEmpty);
    }
    let threshold = cfg.policy.threshold()?;
    if threshold > 0.0 && defront.model().is_none() && faces.iter().any(|f| f.error < threshold) {
        return Err(Error::ModelNotLoaded);
    }
    assert_disjoint(faces.iter().map(|f| f.path.as_path()), eval_paths.iter().map(|p| p.as_path()))?;
    let before = defront.model().map(|m| m.fingerprint()).transpose()?;

    let errors: Vec<f64> = faces.iter().map(|f| f.error).collect();
    let num_classes = faces.iter().map(|f| f.label).max().expect("non-empty") + 1;
    let model = EmbedModel::new(backbone_cfg, num_classes, dtype, device, cfg.seed)?;
    let margin = cfg.margin_config(num_classes);
    let params = model.params();
    let mut opt = Sgd::new(SgdConfig {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    });
    let micro_per_epoch = faces.len() / cfg.batch_size;
    let steps_per_epoch = micro_per_epoch / cfg.accumulation_steps;
    if steps_per_epoch == 0 {
        return Err(Error::ConfigInvalid(format!(
            "{} images cannot fill one effective batch of {}",
            faces.len(),
            cfg.effective_batch()
        )));
    }
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let mut step = 0u64;
    let mut lr_trace = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(faces.len(), cfg.seed, epoch as u64);
        let decisions = decide_epoch(&errors, &cfg.policy, epoch as u64)?;
        let mut augmented = 0usize;
        let mut seen = 0usize;
        let mut loss_total = 0.0;
        for s in 0..steps_per_epoch {
            let start = Instant::now();
            let mut micro = Vec::with_capacity(cfg.accumulation_steps);
            for m in 0..cfg.accumulation_steps {
                let lo = (s * cfg.accumulation_steps + m) * cfg.batch_size;
                let idx = &order[lo..lo + cfg.batch_size];
                let (images, n_aug) = micro_batch_images(faces, idx, &decisions, defront)?;
                augmented += n_aug;
                seen += idx.len();
                let refs: Vec<&Image> = images.iter().collect();
                let labels: Vec<usize> = idx.iter().map(|&i| faces[i].label).collect();
                micro.push((batch_tensor(&refs, dtype, device)?, labels));
            }
            let (grads, loss) = accumulated_gradients(&model, &micro, &margin, Mode::Train).map_err(|e| match e {
                Error::NonFiniteLoss { name, value, .. } => Error::NonFiniteLoss {
                    name,
                    step: step + 1,
                    value,
                },
                e => e,
            })?;
            let lr = poly_lr(cfg.lr0, step, total_steps, cfg.power);
            opt.step(&params, &grads, lr)?;
            step += 1;
            lr_trace.push(lr);
            loss_total += loss;
            let values = [
                ("loss".to_string(), loss),
                ("lr".to_string(), lr),
                ("epoch".to_string(), epoch as f64),
                (
                    "images_per_sec".to_string(),
                    cfg.effective_batch() as f64 / start.elapsed().as_secs_f64(),
                ),
            ];
            metrics.log(step, BTreeMap::from(values))?;
        }
        let summary = EpochSummary {
            epoch,
            mean_loss: loss_total / steps_per_epoch as f64,
            augmented_fraction: augmented as f64 / seen as f64,
            images: seen,
        };
        log::info!(
            "embedding epoch {epoch}: loss {:.4}, augmented {:.3}",
            summary.mean_loss,
            summary.augmented_fraction
        );
        epochs.push(summary);
    }
    let after = defront.model().map(|m| m.fingerprint()).transpose()?;
    if before != after {
        return Err(Error::InvalidState("defrontalization model changed during embedding training".into()));
    }
    Ok(EmbedTrainResult {
        model,
        epochs,
        lr_trace,
        steps: step,
        defront_fingerprint: after,
    })
}
