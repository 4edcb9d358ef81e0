//! Residual embedding backbone producing unit-norm face embeddings.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::layers::{lrelu, BatchNorm, Conv2d, Linear, Mode};
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub width: usize,
    /// Basic blocks per stage; each stage halves the resolution and doubles
    /// the channel count.
    pub blocks: Vec<usize>,
    pub stem_stride: usize,
    pub embedding_dim: usize,
    pub input_size: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            width: 16,
            blocks: vec![1, 1, 1],
            stem_stride: 2,
            embedding_dim: 128,
            input_size: 112,
        }
    }

    /// Block layout of a 50-layer residual face network.
    pub fn full() -> Self {
        Self {
            width: 64,
            blocks: vec![3, 4, 14, 3],
            stem_stride: 1,
            embedding_dim: 512,
            input_size: 112,
        }
    }

    pub fn final_size(&self) -> usize {
        self.input_size / self.stem_stride / (1 << self.blocks.len())
    }

    fn validate(&self) -> Result<()> {
        let div = self.stem_stride * (1 << self.blocks.len());
        if self.width == 0
            || self.embedding_dim == 0
            || self.blocks.is_empty()
            || self.blocks.contains(&0)
            || self.stem_stride == 0
            || self.input_size % div != 0
        {
            return Err(Error::ConfigInvalid(format!("invalid backbone config {self:?}")));
        }
        Ok(())
    }
}

struct Block {
    bn0: BatchNorm,
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::with_init(
                    store,
                    &format!("{name}.short"),
                    (cin, cout, 1, stride),
                    false,
                    Init::Kaiming { fan_in: cin, gain: 1.0 },
                )?,
                BatchNorm::new(store, &format!("{name}.short_bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            bn0: BatchNorm::new(store, &format!("{name}.bn0"), cin)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, false)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, stride, false)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv1.forward(&self.bn0.forward(x, mode)?)?;
        let y = lrelu(&self.bn1.forward(&y, mode)?)?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let s = match &self.shortcut {
            Some((c, bn)) => bn.forward(&c.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + s)?)
    }
}

pub struct Backbone {
    cfg: BackboneConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
    head_bn: BatchNorm,
    fc: Linear,
    emb_bn: BatchNorm,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let stem = Conv2d::new(store, "stem", 3, w, 3, cfg.stem_stride, false)?;
        let stem_bn = BatchNorm::new(store, "stem_bn", w)?;
        let mut blocks = Vec::new();
        let mut cin = w;
        for (s, &n) in cfg.blocks.iter().enumerate() {
            let cout = w << s;
            for b in 0..n {
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(Block::new(store, &format!("s{s}.b{b}"), cin, cout, stride)?);
                cin = cout;
            }
        }
        let fs = cfg.final_size();
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stem_bn,
            blocks,
            head_bn: BatchNorm::new(store, "head_bn", cin)?,
            fc: Linear::new(store, "fc", cin * fs * fs, cfg.embedding_dim, true)?,
            emb_bn: BatchNorm::new(store, "emb_bn", cfg.embedding_dim)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Pre-normalization embedding features `(N, embedding_dim)`.
    pub fn features(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!("(N, 3, {s}, {s})"), x.dims()));
        }
        let mut y = lrelu(&self.stem_bn.forward(&self.stem.forward(x)?, mode)?)?;
        for b in &self.blocks {
            y = b.forward(&y, mode)?;
        }
        let y = self.head_bn.forward(&y, mode)?.flatten_from(1)?;
        self.emb_bn.forward(&self.fc.forward(&y)?, mode)
    }

    /// Unit-norm embeddings `(N, embedding_dim)`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        l2_normalize(&self.features(x, mode)?)
    }
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            width: 4,
            blocks: vec![1, 1],
            stem_stride: 4,
            embedding_dim: 16,
            input_size: 112,
        }
    }

    fn input(n: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..n * 3 * 112 * 112).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (n, 3, 112, 112), &Device::Cpu).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_and_batch_consistent() {
        let mut s = ParamStore::new(DType::F32, &Device::Cpu, 0);
        let net = Backbone::new(&mut s, &tiny()).unwrap();
        let x = input(2, 1);
        let e = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(e.dims(), &[2, 16]);
        for row in e.to_vec2::<f32>().unwrap() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let a = net.forward(&x.narrow(0, 0, 1).unwrap(), Mode::Eval).unwrap();
        let b = net.forward(&x.narrow(0, 1, 1).unwrap(), Mode::Eval).unwrap();
        let joined = Tensor::cat(&[a, b], 0).unwrap();
        let d = (joined - &e).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5, "{d}");
        let cos = (e.get(0).unwrap() * e.get(0).unwrap()).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!((cos - 1.0).abs() < 1e-5);
    }

    #[test]
    fn desk_and_full_reach_seven() {
        assert_eq!(BackboneConfig::desk().final_size(), 7);
        assert_eq!(BackboneConfig::full().final_size(), 7);
    }

    #[test]
    fn scale_invariant_normalization() {
        let x = Tensor::new(&[[3f64, 4.0]], &Device::Cpu).unwrap();
        let y = l2_normalize(&(x.clone() * 1e6).unwrap()).unwrap();
        for v in [l2_normalize(&x).unwrap(), y] {
            let v = v.to_vec2::<f64>().unwrap();
            assert!((v[0][0] - 0.6).abs() < 1e-12 && (v[0][1] - 0.8).abs() < 1e-12);
        }
    }
}
