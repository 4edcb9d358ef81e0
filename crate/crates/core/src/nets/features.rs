//! Fixed feature extractors for the perceptual and identity losses.
//!
//! Both networks are seeded at construction and can be overwritten with
//! pretrained weights via `load`. Their parameters are never optimized.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, DType, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Linear};
use super::params::{Checkpoint, ParamStore};
use crate::error::{Error, Result};

pub const PERCEPTUAL_TAPS: [&str; 5] = ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"];
pub const IDENTITY_TAPS: [&str; 2] = ["fc2", "pool"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNetConfig {
    pub width: usize,
    pub seed: u64,
}

impl FeatureNetConfig {
    pub fn desk() -> Self {
        Self { width: 8, seed: 19 }
    }
}

fn check_taps(known: &[&str], wanted: &[&str]) -> Result<()> {
    match wanted.iter().find(|t| !known.contains(t)) {
        Some(t) => Err(Error::UnknownTap(t.to_string())),
        None => Ok(()),
    }
}

fn load_into(store: &ParamStore, path: &Path, device: &Device) -> Result<()> {
    let ck = Checkpoint::load(path, device)?;
    store.import(&ck.section("net"))
}

/// VGG-style stack with one tapped convolution per stage and 2x2 average
/// pooling between stages. Pooling is skipped once the map is smaller than
/// 2x2, so small inputs remain valid.
pub struct PerceptualNet {
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl PerceptualNet {
    pub fn new(cfg: &FeatureNetConfig, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device, cfg.seed);
        let w = cfg.width;
        let chans = [3, w, 2 * w, 4 * w, 8 * w, 8 * w];
        let convs = (0..5)
            .map(|i| Conv2d::new(&mut store, PERCEPTUAL_TAPS[i], chans[i], chans[i + 1], 3, 1, true))
            .collect::<Result<_>>()?;
        Ok(Self { store, convs })
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        load_into(&self.store, path, self.store.device())
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn tap_names(&self) -> &'static [&'static str] {
        &PERCEPTUAL_TAPS
    }

    pub fn taps(&self, x: &Tensor, wanted: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        check_taps(&PERCEPTUAL_TAPS, wanted)?;
        let mut out = BTreeMap::new();
        let mut y = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 && y.dim(2)? >= 2 && y.dim(3)? >= 2 {
                y = y.avg_pool2d(2)?;
            }
            y = conv.forward(&y)?.relu()?;
            if wanted.contains(&PERCEPTUAL_TAPS[i]) {
                out.insert(PERCEPTUAL_TAPS[i].to_string(), y.clone());
            }
            if out.len() == wanted.len() {
                break;
            }
        }
        Ok(out)
    }
}

/// Compact identity network: three stride-2 convolutions, global average
/// pooling (tap `pool`) and two fully connected layers (tap `fc2`).
pub struct IdentityNet {
    store: ParamStore,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl IdentityNet {
    pub fn new(cfg: &FeatureNetConfig, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device, cfg.seed.wrapping_add(1));
        let w = cfg.width;
        let convs = vec![
            Conv2d::new(&mut store, "conv1", 3, w, 3, 2, true)?,
            Conv2d::new(&mut store, "conv2", w, 2 * w, 3, 2, true)?,
            Conv2d::new(&mut store, "conv3", 2 * w, 4 * w, 3, 2, true)?,
        ];
        let fc1 = Linear::new(&mut store, "fc1", 4 * w, 8 * w, true)?;
        let fc2 = Linear::new(&mut store, "fc2", 8 * w, 8 * w, true)?;
        Ok(Self {
            store,
            convs,
            fc1,
            fc2,
        })
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        load_into(&self.store, path, self.store.device())
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn tap_names(&self) -> &'static [&'static str] {
        &IDENTITY_TAPS
    }

    pub fn taps(&self, x: &Tensor, wanted: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        check_taps(&IDENTITY_TAPS, wanted)?;
        let mut y = x.clone();
        for c in &self.convs {
            y = c.forward(&y)?.relu()?;
        }
        let pool = y.mean(3)?.mean(2)?;
        let mut out = BTreeMap::new();
        if wanted.contains(&"fc2") {
            let h = self.fc1.forward(&pool)?.relu()?;
            out.insert("fc2".to_string(), self.fc2.forward(&h)?);
        }
        if wanted.contains(&"pool") {
            out.insert("pool".to_string(), pool);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perceptual_taps_at_small_size() {
        let net = PerceptualNet::new(&FeatureNetConfig::desk(), DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::ones((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let t = net.taps(&x, &PERCEPTUAL_TAPS).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t["conv1_1"].dims(), &[1, 8, 8, 8]);
        assert_eq!(t["conv4_1"].dims(), &[1, 64, 1, 1]);
        assert_eq!(t["conv5_1"].dims(), &[1, 64, 1, 1]);
        let again = net.taps(&x, &PERCEPTUAL_TAPS).unwrap();
        for k in PERCEPTUAL_TAPS {
            assert_eq!(t[k].dims(), again[k].dims());
        }
    }

    #[test]
    fn identity_taps_and_unknown_tap() {
        let net = IdentityNet::new(&FeatureNetConfig::desk(), DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::ones((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let t = net.taps(&x, &IDENTITY_TAPS).unwrap();
        assert_eq!(t.keys().cloned().collect::<Vec<_>>(), vec!["fc2", "pool"]);
        assert!(matches!(net.taps(&x, &["fc7"]), Err(Error::UnknownTap(_))));
        let p = PerceptualNet::new(&FeatureNetConfig::desk(), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(p.taps(&x, &["pool"]), Err(Error::UnknownTap(_))));
    }

    #[test]
    fn load_overwrites_weights() {
        let cfg = FeatureNetConfig::desk();
        let a = PerceptualNet::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let b = PerceptualNet::new(&FeatureNetConfig { seed: 77, ..cfg }, DType::F32, &Device::Cpu).unwrap();
        assert_ne!(a.store().fingerprint().unwrap(), b.store().fingerprint().unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vgg.ckpt");
        Checkpoint::new("perceptual", 0, "").with_store("net", b.store()).save(&p).unwrap();
        a.load(&p).unwrap();
        assert_eq!(a.store().fingerprint().unwrap(), b.store().fingerprint().unwrap());
    }
}
