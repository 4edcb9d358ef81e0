//! U-Net optical-flow network predicting displacement fields at the three
//! output scales, coarse to fine.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{lrelu, upsample2x, Conv2d};
use super::params::{Init, ParamStore};
use super::warp::FlowField;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowNetConfig {
    pub width: usize,
    /// Number of stride-2 encoder stages. Four stages bring 112 down to 7.
    pub levels: usize,
    /// Channel multiplier cap relative to `width`.
    pub max_mult: usize,
    pub input_size: usize,
}

impl FlowNetConfig {
    pub fn desk() -> Self {
        Self {
            width: 8,
            levels: 4,
            max_mult: 4,
            input_size: 112,
        }
    }

    pub fn full() -> Self {
        Self {
            width: 64,
            levels: 4,
            max_mult: 4,
            input_size: 112,
        }
    }

    /// The full preset with the extra encoder and decoder stage restored.
    /// Needs an input divisible by 32.
    pub fn reference() -> Self {
        Self {
            levels: 5,
            input_size: 128,
            ..Self::full()
        }
    }

    fn channels(&self, level: usize) -> usize {
        self.width * (1usize << level).min(self.max_mult)
    }
}

pub struct FlowNet {
    cfg: FlowNetConfig,
    stem: Conv2d,
    down: Vec<(Conv2d, Conv2d)>,
    /// Decoder stage per level `0..levels`, fusing the upsampled deeper
    /// features with the skip at that level.
    up: Vec<(Conv2d, Conv2d)>,
    heads: Vec<Conv2d>,
}

impl FlowNet {
    pub fn new(store: &mut ParamStore, cfg: &FlowNetConfig) -> Result<Self> {
        if cfg.levels < 3 || cfg.width == 0 || cfg.input_size % (1 << cfg.levels) != 0 {
            return Err(Error::ConfigInvalid(format!(
                "flow net needs levels >= 3 and input divisible by 2^levels: {cfg:?}"
            )));
        }
        let c = |l| cfg.channels(l);
        let stem = Conv2d::new(store, "stem", 3, c(0), 3, 1, true)?;
        let mut down = Vec::new();
        for l in 1..=cfg.levels {
            down.push((
                Conv2d::new(store, &format!("down{l}.a"), c(l - 1), c(l), 3, 2, true)?,
                Conv2d::new(store, &format!("down{l}.b"), c(l), c(l), 3, 1, true)?,
            ));
        }
        let mut up = Vec::new();
        for l in 0..cfg.levels {
            up.push((
                Conv2d::new(store, &format!("up{l}.a"), c(l + 1) + c(l), c(l), 3, 1, true)?,
                Conv2d::new(store, &format!("up{l}.b"), c(l), c(l), 3, 1, true)?,
            ));
        }
        let heads = (0..3)
            .map(|l| {
                Conv2d::with_init(
                    store,
                    &format!("head{l}"),
                    (c(l), 2, 3, 1),
                    true,
                    Init::Normal(1e-3),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            down,
            up,
            heads,
        })
    }

    pub fn config(&self) -> &FlowNetConfig {
        &self.cfg
    }

    /// Flow fields at the three output scales, coarsest first.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<FlowField>> {
        let (_, ch, h, w) = x.dims4()?;
        let s = self.cfg.input_size;
        if ch != 3 || h != s || w != s {
            return Err(Error::shape(format!("(N, 3, {s}, {s})"), x.dims()));
        }
        let mut skips = vec![lrelu(&self.stem.forward(x)?)?];
        for (a, b) in &self.down {
            let y = lrelu(&a.forward(skips.last().expect("stem"))?)?;
            skips.push(lrelu(&b.forward(&y)?)?);
        }
        let mut d = skips.pop().expect("bottleneck");
        let mut flow: Option<Tensor> = None;
        let mut out = Vec::new();
        for l in (0..self.cfg.levels).rev() {
            let (a, b) = &self.up[l];
            let cat = Tensor::cat(&[&upsample2x(&d)?, &skips[l]], 1)?;
            d = lrelu(&b.forward(&lrelu(&a.forward(&cat)?)?)?)?;
            if l < 3 {
                let delta = self.heads[l].forward(&d)?;
                let f = match flow {
                    Some(prev) => (upsample2x(&prev)? * 2.0)?.add(&delta)?,
                    None => delta,
                };
                out.push(FlowField::new(f.clone())?);
                flow = Some(f);
            }
        }
        Ok(out)
    }
}

pub fn flow_param_count(cfg: &FlowNetConfig) -> Result<usize> {
    let mut store = ParamStore::new(candle_core::DType::F32, &candle_core::Device::Cpu, 0);
    FlowNet::new(&mut store, cfg)?;
    Ok(store.num_params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::SCALES;
    use candle_core::{DType, Device};

    #[test]
    fn desk_shapes_and_determinism() {
        let mut store = ParamStore::new(DType::F32, &Device::Cpu, 1);
        let net = FlowNet::new(&mut store, &FlowNetConfig::desk()).unwrap();
        let x = Tensor::zeros((2, 3, 112, 112), DType::F32, &Device::Cpu).unwrap();
        let a = net.forward(&x).unwrap();
        let scales: Vec<_> = a.iter().map(|f| f.scale).collect();
        assert_eq!(scales, SCALES.to_vec());
        for f in &a {
            assert_eq!(f.flow.dims(), &[2, 2, f.scale, f.scale]);
        }
        let b = net.forward(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            let d = (&p.flow - &q.flow).unwrap().abs().unwrap().max_all().unwrap();
            assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn wrong_input_size_rejected() {
        let mut store = ParamStore::new(DType::F32, &Device::Cpu, 1);
        let net = FlowNet::new(&mut store, &FlowNetConfig::desk()).unwrap();
        let x = Tensor::zeros((1, 3, 96, 96), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::ShapeMismatch { .. })));
    }
}
