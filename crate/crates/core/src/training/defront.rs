//! Adversarial training of the flow-guided generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::flows::{FlowPair, BWD_SECTION, FWD_SECTION};
use super::metrics::MetricsLog;
use super::optim::{collect_grads, Adam, AdamConfig};
use super::samples::{epoch_order, pair_batch, PairBatch, PairSample};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, identity_preserving_loss, illumination_preserving_loss, mask_loss,
    perceptual_loss, pixel_loss, total_loss, GeneratorObjective, LossComponents, LossWeights,
    Reduction,
};
use crate::nets::{
    warp, Checkpoint, DefrontModel, Discriminator, Generator, IdentityNet, NetConfig, ParamStore,
    PerceptualNet,
};

pub const DISC_SECTION: &str = "discriminator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefrontTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub generator_adam: AdamConfig,
    pub discriminator_adam: AdamConfig,
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub objective: GeneratorObjective,
    /// Update the forward flow together with the generator.
    pub train_flows: bool,
    pub seed: u64,
}

impl Default for DefrontTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            generator_adam: AdamConfig::default(),
            discriminator_adam: AdamConfig::default(),
            weights: LossWeights::default(),
            reduction: Reduction::Mean,
            objective: GeneratorObjective::NonSaturating,
            train_flows: false,
            seed: 0,
        }
    }
}

impl DefrontTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::ConfigInvalid("defront training needs epochs >= 1 and batch_size >= 1".into()));
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Generator, discriminator, flows, fixed loss networks and optimizer
/// state. Owned exclusively by one training loop.
pub struct DefrontTrainer {
    pub cfg: DefrontTrainConfig,
    pub net_cfg: NetConfig,
    pub flows: FlowPair,
    pub gen_store: ParamStore,
    pub generator: Generator,
    pub disc_store: ParamStore,
    pub discriminator: Discriminator,
    pub perceptual: PerceptualNet,
    pub identity: IdentityNet,
    opt_g: Adam,
    opt_d: Adam,
    opt_f: Adam,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    config_echo: String,
}

impl DefrontTrainer {
    pub fn new(net_cfg: &NetConfig, cfg: &DefrontTrainConfig, flows: FlowPair, config_echo: &str) -> Result<Self> {
        cfg.validate()?;
        let dtype = flows.fwd_store.dtype();
        let device = flows.fwd_store.device().clone();
        let mut gen_store = ParamStore::new(dtype, &device, cfg.seed.wrapping_add(2));
        let generator = Generator::new(&mut gen_store, &net_cfg.generator)?;
        let mut disc_store = ParamStore::new(dtype, &device, cfg.seed.wrapping_add(3));
        let discriminator = Discriminator::new(&mut disc_store, &net_cfg.discriminator)?;
        Ok(Self {
            cfg: cfg.clone(),
            net_cfg: net_cfg.clone(),
            flows,
            gen_store,
            generator,
            disc_store,
            discriminator,
            perceptual: PerceptualNet::new(&net_cfg.perceptual, dtype, &device)?,
            identity: IdentityNet::new(&net_cfg.identity, dtype, &device)?,
            opt_g: Adam::new(cfg.generator_adam.clone()),
            opt_d: Adam::new(cfg.discriminator_adam.clone()),
            opt_f: Adam::new(cfg.generator_adam.clone()),
            step: 0,
            epoch: 0,
            config_echo: config_echo.to_string(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.gen_store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.gen_store.device()
    }

    /// All six generator loss components on one batch.
    pub fn components(&self, batch: &PairBatch) -> Result<(LossComponents, Tensor)> {
        let x = batch.input();
        let mut fwd = self.flows.fwd.forward(x)?;
        if !self.cfg.train_flows {
            for f in &mut fwd {
                f.flow = f.flow.detach();
            }
        }
        let out = self.generator.forward(x, &fwd)?;
        let synth = out.finest_image();
        let red = self.cfg.reduction;
        let bwd = self.flows.bwd.forward(x)?;
        let warped = out
            .images
            .iter()
            .zip(&bwd)
            .map(|(img, f)| {
                let mut f = f.clone();
                f.flow = f.flow.detach();
                warp(img, &f.flow)
            })
            .collect::<Result<Vec<_>>>()?;
        let d_fake = self.discriminator.forward(synth)?;
        // The generator term ignores the real branch.
        let (_, adversarial) = adversarial_loss(&d_fake.detach(), &d_fake, self.cfg.objective)?;
        let c = LossComponents {
            pixel: pixel_loss(&out.images, &batch.profile, red)?,
            perceptual: perceptual_loss(
                &self.perceptual,
                synth,
                batch.target(),
                &self.cfg.weights.perceptual_layers,
                red,
            )?,
            adversarial,
            illumination: illumination_preserving_loss(&warped, &batch.frontal, red)?,
            identity: identity_preserving_loss(&self.identity, synth, batch.target(), red)?,
            mask: mask_loss(&out.masks, &batch.masks)?,
        };
        Ok((c, synth.detach()))
    }

    /// One generator step followed by one discriminator step.
    pub fn train_step(&mut self, batch: &PairBatch) -> Result<BTreeMap<String, f64>> {
        let step = self.step + 1;
        let (c, synth) = self.components(batch)?;
        let total = total_loss(&self.cfg.weights, &c)?;
        let mut values: BTreeMap<String, f64> = LossComponents::NAMES
            .iter()
            .zip(c.values()?)
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        values.insert("total".into(), scalar(&total)?);
        if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                name: name.clone(),
                step,
                value: *v,
            });
        }
        let grads = total.backward()?;
        let gp = self.gen_store.trainable();
        self.opt_g.step(&gp, &collect_grads(&grads, &gp)?)?;
        if self.cfg.train_flows {
            let fp = self.flows.fwd_store.trainable();
            self.opt_f.step(&fp, &collect_grads(&grads, &fp)?)?;
        }

        let d_real = self.discriminator.forward(batch.target())?;
        let d_fake = self.discriminator.forward(&synth)?;
        let (disc, _) = adversarial_loss(&d_real, &d_fake, self.cfg.objective)?;
        let real_ok = d_real.ge(0.5)?.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?;
        let fake_ok = d_fake.lt(0.5)?.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?;
        values.insert("discriminator".into(), scalar(&disc)?);
        values.insert("discriminator_accuracy".into(), 0.5 * (real_ok + fake_ok));
        let dp = self.disc_store.trainable();
        self.opt_d.step(&dp, &collect_grads(&disc.backward()?, &dp)?)?;
        self.step = step;
        Ok(values)
    }

    /// Batches of one epoch in their seeded order.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        epoch_order(n, self.cfg.seed, epoch as u64)
            .chunks(self.cfg.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn run_epoch(&mut self, samples: &[PairSample], metrics: &mut MetricsLog) -> Result<()> {
        let epoch = self.epoch;
        for idx in self.epoch_batches(samples.len(), epoch) {
            let start = Instant::now();
            let refs: Vec<&PairSample> = idx.iter().map(|&i| &samples[i]).collect();
            let batch = pair_batch(&refs, self.dtype(), &self.device().clone())?;
            let mut values = self.train_step(&batch)?;
            values.insert("epoch".into(), epoch as f64);
            values.insert("images_per_sec".into(), refs.len() as f64 / start.elapsed().as_secs_f64());
            metrics.log(self.step, values)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Mean finest-scale-inclusive pixel loss over `samples`, no updates.
    pub fn mean_pixel_loss(&self, samples: &[PairSample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in samples.chunks(self.cfg.batch_size) {
            let refs: Vec<&PairSample> = chunk.iter().collect();
            let batch = pair_batch(&refs, self.dtype(), &self.device().clone())?;
            let mut fwd = self.flows.fwd.forward(batch.input())?;
            for f in &mut fwd {
                f.flow = f.flow.detach();
            }
            let out = self.generator.forward(batch.input(), &fwd)?;
            total += scalar(&pixel_loss(&out.images, &batch.profile, self.cfg.reduction)?)? * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("defront", self.step, &self.config_echo)
            .with_store(FWD_SECTION, &self.flows.fwd_store)
            .with_store(BWD_SECTION, &self.flows.bwd_store)
            .with_store(DefrontModel::GEN_SECTION, &self.gen_store)
            .with_store(DISC_SECTION, &self.disc_store);
        for (prefix, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d), ("opt_f", &self.opt_f)] {
            ck.tensors.extend(opt.export(prefix));
        }
        ck.meta.insert("epoch".into(), self.epoch.into());
        Ok(ck)
    }

    /// Restore weights, optimizer state and counters from [`Self::checkpoint`].
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        self.flows.import(ck)?;
        self.gen_store.import(&ck.section(DefrontModel::GEN_SECTION))?;
        self.disc_store.import(&ck.section(DISC_SECTION))?;
        let adam_keys = |p: &str| ck.tensors.keys().any(|k| k.starts_with(&format!("{p}/")));
        for (prefix, opt) in [("opt_g", &mut self.opt_g), ("opt_d", &mut self.opt_d), ("opt_f", &mut self.opt_f)] {
            if adam_keys(prefix) {
                opt.import(prefix, &ck.tensors)?;
            }
        }
        self.step = ck.step;
        self.epoch = ck
            .meta
            .get("epoch")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::InvalidState("checkpoint lacks the epoch counter".into()))? as usize;
        Ok(())
    }

    /// An inference copy of the forward flow and generator.
    pub fn model(&self) -> Result<DefrontModel> {
        let ck = self.checkpoint()?;
        DefrontModel::from_checkpoint(&ck, &self.net_cfg, self.device())
    }
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("defront_epoch{epoch:03}.ckpt"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefrontTrainReport {
    pub steps: u64,
    pub epochs: usize,
    pub initial_pixel: f64,
    pub final_pixel: f64,
    pub checkpoints: Vec<PathBuf>,
}

/// Run the remaining epochs of `trainer`, checkpointing after each one when
/// `out_dir` is given.
pub fn train_defront(
    trainer: &mut DefrontTrainer,
    samples: &[PairSample],
    metrics: &mut MetricsLog,
    out_dir: Option<&Path>,
) -> Result<DefrontTrainReport> {
    if samples.is_empty() {
        return Err(Error::DataEmpty);
    }
    let initial = trainer.mean_pixel_loss(samples)?;
    let mut checkpoints = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        trainer.run_epoch(samples, metrics)?;
        log::info!("defront epoch {} done at step {}", trainer.epoch, trainer.step);
        if let Some(dir) = out_dir {
            let p = epoch_checkpoint_path(dir, trainer.epoch);
            trainer.checkpoint()?.save(&p)?;
            checkpoints.push(p);
        }
    }
    Ok(DefrontTrainReport {
        steps: trainer.step,
        epochs: trainer.epoch,
        initial_pixel: initial,
        final_pixel: trainer.mean_pixel_loss(samples)?,
        checkpoints,
    })
}
