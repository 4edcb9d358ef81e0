//! Optimizers with checkpointable state.
//!
//! Gradients are passed as a name-keyed map so that accumulated or clipped
//! gradients go through the same update path as fresh ones.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Grads = BTreeMap<String, Tensor>;

/// Detached gradients of every parameter in `params`; parameters the loss
/// does not reach get zeros. Detaching keeps optimizer state from pinning
/// the forward graph.
pub fn collect_grads(store: &GradStore, params: &[(String, Var)]) -> Result<Grads> {
    params
        .iter()
        .map(|(k, v)| {
            let g = match store.get(v.as_tensor()) {
                Some(g) => g.detach(),
                None => v.as_tensor().zeros_like()?,
            };
            Ok((k.clone(), g))
        })
        .collect()
}

/// `acc += g` elementwise, creating entries on first use.
pub fn accumulate(acc: &mut Grads, g: Grads) -> Result<()> {
    for (k, t) in g {
        let next = match acc.remove(&k) {
            Some(prev) => (prev + t)?,
            None => t,
        };
        acc.insert(k, next);
    }
    Ok(())
}

fn grad<'a>(grads: &'a Grads, name: &str) -> Result<&'a Tensor> {
    grads
        .get(name)
        .ok_or_else(|| Error::InvalidState(format!("no gradient for `{name}`")))
}

fn export_state(prefix: &str, maps: &[(&str, &BTreeMap<String, Tensor>)]) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (tag, m) in maps {
        for (k, t) in *m {
            out.insert(format!("{prefix}/{tag}/{k}"), t.clone());
        }
    }
    out
}

fn import_state(prefix: &str, tag: &str, tensors: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}/{tag}/");
    tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(&p).map(|n| (n.to_string(), t.clone())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// The usual GAN setting; a labeled preset, not a measured optimum.
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &[(String, Var)], grads: &Grads) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, var) in params {
            let g = grad(grads, k)?;
            let m = match self.m.get(k) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.v.get(k) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let denom = ((&v / c2)?.sqrt()? + eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_detached_tensor() - (update * lr)?)?)?;
            self.m.insert(k.clone(), m);
            self.v.insert(k.clone(), v);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = export_state(prefix, &[("m", &self.m), ("v", &self.v)]);
        out.insert(format!("{prefix}/t"), Tensor::new(self.t as f64, &candle_core::Device::Cpu).expect("scalar"));
        out
    }

    pub fn import(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let t = tensors
            .get(&format!("{prefix}/t"))
            .ok_or_else(|| Error::InvalidState(format!("checkpoint lacks `{prefix}/t`")))?;
        self.t = t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? as u64;
        self.m = import_state(prefix, "m", tensors);
        self.v = import_state(prefix, "v", tensors);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and coupled weight decay:
/// `d = g + wd·p`, `b = μ·b + d`, `p -= lr·b`.
pub struct Sgd {
    pub cfg: SgdConfig,
    buf: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            buf: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &[(String, Var)], grads: &Grads, lr: f64) -> Result<()> {
        for (k, var) in params {
            let p = var.as_detached_tensor();
            let d = (grad(grads, k)? + (&p * self.cfg.weight_decay)?)?;
            let b = match self.buf.get(k) {
                Some(b) => ((b * self.cfg.momentum)? + d)?,
                None => d,
            };
            var.set(&(&p - (&b * lr)?)?)?;
            self.buf.insert(k.clone(), b);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        export_state(prefix, &[("buf", &self.buf)])
    }

    pub fn import(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) {
        self.buf = import_state(prefix, "buf", tensors);
    }
}
