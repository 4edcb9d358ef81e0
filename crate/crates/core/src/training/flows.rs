//! Self-supervised pretraining of the forward and backward flow networks.
//!
//! Both networks see the frontal half. The forward flow is trained so that
//! warping the frontal half reproduces the profile, the backward flow so
//! that warping the profile reproduces the frontal half. A first-order
//! smoothness penalty regularizes both.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::metrics::MetricsLog;
use super::optim::{collect_grads, Adam, AdamConfig};
use super::samples::{epoch_order, pair_batch, PairBatch, PairSample};
use crate::error::{Error, Result};
use crate::losses::Reduction;
use crate::nets::{warp, Checkpoint, FlowField, FlowNet, FlowNetConfig, ParamStore};

pub const FWD_SECTION: &str = "flow_fwd";
pub const BWD_SECTION: &str = "flow_bwd";

pub struct FlowPair {
    pub fwd_store: ParamStore,
    pub fwd: FlowNet,
    pub bwd_store: ParamStore,
    pub bwd: FlowNet,
}

impl FlowPair {
    pub fn new(cfg: &FlowNetConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        // The forward seed matches `DefrontModel::new` so both agree on init.
        let mut fwd_store = ParamStore::new(dtype, device, seed);
        let fwd = FlowNet::new(&mut fwd_store, cfg)?;
        let mut bwd_store = ParamStore::new(dtype, device, seed.wrapping_add(1));
        let bwd = FlowNet::new(&mut bwd_store, cfg)?;
        Ok(Self {
            fwd_store,
            fwd,
            bwd_store,
            bwd,
        })
    }

    pub fn import(&self, ck: &Checkpoint) -> Result<()> {
        self.fwd_store.import(&ck.section(FWD_SECTION))?;
        self.bwd_store.import(&ck.section(BWD_SECTION))
    }

    pub fn checkpoint(&self, step: u64, config: &str) -> Checkpoint {
        Checkpoint::new("flows", step, config)
            .with_store(FWD_SECTION, &self.fwd_store)
            .with_store(BWD_SECTION, &self.bwd_store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for FlowPretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.9,
                ..AdamConfig::default()
            },
            smoothness: 0.1,
            seed: 0,
        }
    }
}

/// Mean absolute first differences along both spatial axes.
pub fn smoothness_penalty(f: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = f.dims4()?;
    let dx = (f.narrow(3, 1, w - 1)? - f.narrow(3, 0, w - 1)?)?.abs()?.mean_all()?;
    let dy = (f.narrow(2, 1, h - 1)? - f.narrow(2, 0, h - 1)?)?.abs()?.mean_all()?;
    Ok((dx + dy)?)
}

fn warp_all(images: &[Tensor], flows: &[FlowField]) -> Result<Vec<Tensor>> {
    images.iter().zip(flows).map(|(x, f)| warp(x, &f.flow)).collect()
}

fn sum(ts: Vec<Tensor>) -> Result<Tensor> {
    let mut it = ts.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::EmptyInput("nothing to sum".into()))?;
    for t in it {
        acc = (acc + t)?;
    }
    Ok(acc)
}

pub struct FlowLosses {
    pub photometric_fwd: Tensor,
    pub photometric_bwd: Tensor,
    pub smoothness: Tensor,
}

pub fn flow_losses(flows: &FlowPair, batch: &PairBatch) -> Result<FlowLosses> {
    let f = flows.fwd.forward(batch.input())?;
    let b = flows.bwd.forward(batch.input())?;
    let red = Reduction::Mean;
    let photometric_fwd = crate::losses::pixel_loss(&warp_all(&batch.frontal, &f)?, &batch.profile, red)?;
    let photometric_bwd = crate::losses::pixel_loss(&warp_all(&batch.profile, &b)?, &batch.frontal, red)?;
    let smooth = f
        .iter()
        .chain(&b)
        .map(|x| smoothness_penalty(&x.flow))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowLosses {
        photometric_fwd,
        photometric_bwd,
        smoothness: sum(smooth)?,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean forward plus backward photometric loss over `samples`, no updates.
pub fn mean_photometric(flows: &FlowPair, samples: &[PairSample], batch_size: usize) -> Result<f64> {
    let (dtype, device) = (flows.fwd_store.dtype(), flows.fwd_store.device().clone());
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PairSample> = chunk.iter().collect();
        let l = flow_losses(flows, &pair_batch(&refs, dtype, &device)?)?;
        total += (scalar(&l.photometric_fwd)? + scalar(&l.photometric_bwd)?) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowPretrainReport {
    pub steps: u64,
    pub initial_photometric: f64,
    pub final_photometric: f64,
}

/// Train both flow networks in place. Zero epochs leaves them at their
/// initialization.
pub fn pretrain_flows(
    samples: &[PairSample],
    cfg: &FlowPretrainConfig,
    flows: &FlowPair,
    metrics: &mut MetricsLog,
) -> Result<FlowPretrainReport> {
    if samples.is_empty() {
        return Err(Error::DataEmpty);
    }
    let bs = cfg.batch_size.max(1);
    let (dtype, device) = (flows.fwd_store.dtype(), flows.fwd_store.device().clone());
    let initial = mean_photometric(flows, samples, bs)?;
    let fwd_params = flows.fwd_store.trainable();
    let bwd_params = flows.bwd_store.trainable();
    let mut opt_f = Adam::new(cfg.adam.clone());
    let mut opt_b = Adam::new(cfg.adam.clone());
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(samples.len(), cfg.seed, epoch as u64);
        for idx in order.chunks(bs) {
            let refs: Vec<&PairSample> = idx.iter().map(|&i| &samples[i]).collect();
            let batch = pair_batch(&refs, dtype, &device)?;
            let l = flow_losses(flows, &batch)?;
            let total = ((&l.photometric_fwd + &l.photometric_bwd)? + (&l.smoothness * cfg.smoothness)?)?;
            let values: BTreeMap<String, f64> = [
                ("photometric_fwd", scalar(&l.photometric_fwd)?),
                ("photometric_bwd", scalar(&l.photometric_bwd)?),
                ("smoothness", scalar(&l.smoothness)?),
                ("total", scalar(&total)?),
                ("epoch", epoch as f64),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            step += 1;
            metrics.log(step, values)?;
            let grads = total.backward()?;
            opt_f.step(&fwd_params, &collect_grads(&grads, &fwd_params)?)?;
            opt_b.step(&bwd_params, &collect_grads(&grads, &bwd_params)?)?;
        }
        log::info!("flow pretraining epoch {epoch} done at step {step}");
    }
    Ok(FlowPretrainReport {
        steps: step,
        initial_photometric: initial,
        final_photometric: mean_photometric(flows, samples, bs)?,
    })
}
