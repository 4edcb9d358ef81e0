//! Flow-guided encoder/decoder generator with per-scale image and mask
//! heads, and the patch discriminator.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{lrelu, resize_to, upsample2x, Conv2d, ResBlock, SelfAttention};
use super::params::{Init, ParamStore};
use super::warp::{warp, FlowField};
use super::SCALES;
use crate::error::{Error, Result};

/// Synthesized images (tanh range) and masks (`[0, 1]`) at
/// [`SCALES`], coarsest first.
#[derive(Clone, Debug)]
pub struct MultiScaleOutput {
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

impl MultiScaleOutput {
    pub fn finest_image(&self) -> &Tensor {
        self.images.last().expect("three scales")
    }

    pub fn finest_mask(&self) -> &Tensor {
        self.masks.last().expect("three scales")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub width: usize,
    pub attention: bool,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            width: 8,
            attention: false,
        }
    }

    pub fn full() -> Self {
        Self {
            width: 64,
            attention: true,
        }
    }
}

struct DecoderStage {
    up: Conv2d,
    fuse: Conv2d,
    image: Conv2d,
    mask: Conv2d,
}

pub struct Generator {
    enc: Vec<Conv2d>,
    res: ResBlock,
    attention: Option<SelfAttention>,
    /// Stages for 28, 56 and 112.
    dec: Vec<DecoderStage>,
}

impl Generator {
    pub fn new(store: &mut ParamStore, cfg: &GeneratorConfig) -> Result<Self> {
        if cfg.width == 0 {
            return Err(Error::ConfigInvalid("generator width must be positive".into()));
        }
        let c = |l: usize| cfg.width << l;
        let enc = vec![
            Conv2d::new(store, "enc0", 3, c(0), 3, 1, true)?,
            Conv2d::new(store, "enc1", c(0), c(1), 3, 2, true)?,
            Conv2d::new(store, "enc2", c(1), c(2), 3, 2, true)?,
            Conv2d::new(store, "enc3", c(2), c(3), 3, 2, true)?,
        ];
        let res = ResBlock::new(store, "res", c(3))?;
        let attention = if cfg.attention {
            Some(SelfAttention::new(store, "attn", c(3))?)
        } else {
            None
        };
        let mut dec = Vec::new();
        for l in (0..3).rev() {
            let head = |fan_in| Init::Kaiming { fan_in, gain: 1.0 };
            dec.push(DecoderStage {
                up: Conv2d::new(store, &format!("dec{l}.up"), c(l + 1), c(l), 3, 1, true)?,
                fuse: Conv2d::new(store, &format!("dec{l}.fuse"), 2 * c(l) + 3, c(l), 3, 1, true)?,
                image: Conv2d::with_init(store, &format!("dec{l}.image"), (c(l), 3, 3, 1), true, head(c(l) * 9))?,
                mask: Conv2d::with_init(store, &format!("dec{l}.mask"), (c(l), 1, 3, 1), true, head(c(l) * 9))?,
            });
        }
        Ok(Self {
            enc,
            res,
            attention,
            dec,
        })
    }

    /// `frontal_half` is `(N, 3, 112, 112)`; `flows` are the forward flow
    /// fields at [`SCALES`].
    pub fn forward(&self, frontal_half: &Tensor, flows: &[FlowField]) -> Result<MultiScaleOutput> {
        let (_, ch, h, w) = frontal_half.dims4()?;
        if ch != 3 || h != SCALES[2] || w != SCALES[2] {
            return Err(Error::shape("(N, 3, 112, 112)", frontal_half.dims()));
        }
        if flows.len() != 3 || flows.iter().zip(SCALES).any(|(f, s)| f.scale != s) {
            return Err(Error::shape("flows at 28, 56, 112", flows.iter().map(|f| f.scale).collect::<Vec<_>>()));
        }
        let mut skips = Vec::new();
        let mut x = frontal_half.clone();
        for conv in &self.enc {
            x = lrelu(&conv.forward(&x)?)?;
            skips.push(x.clone());
        }
        let mut d = self.res.forward(&skips.pop().expect("bottleneck"))?;
        if let Some(att) = &self.attention {
            d = att.forward(&d)?;
        }
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for (k, stage) in self.dec.iter().enumerate() {
            let l = 2 - k;
            let flow = &flows[k].flow;
            let u = lrelu(&stage.up.forward(&upsample2x(&d)?)?)?;
            let warped_skip = warp(&skips[l], flow)?;
            let warped_input = warp(&resize_to(frontal_half, SCALES[k])?, flow)?;
            let cat = Tensor::cat(&[&u, &warped_skip, &warped_input], 1)?;
            d = lrelu(&stage.fuse.forward(&cat)?)?;
            images.push(stage.image.forward(&d)?.tanh()?);
            masks.push(candle_nn::ops::sigmoid(&stage.mask.forward(&d)?)?);
        }
        Ok(MultiScaleOutput { images, masks })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub width: usize,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self { width: 8 }
    }

    pub fn full() -> Self {
        Self { width: 64 }
    }
}

/// Patch discriminator: three stride-2 stages then a 3x3 logit map at 14x14.
pub struct Discriminator {
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, cfg: &DiscriminatorConfig) -> Result<Self> {
        let w = cfg.width;
        if w == 0 {
            return Err(Error::ConfigInvalid("discriminator width must be positive".into()));
        }
        Ok(Self {
            convs: vec![
                Conv2d::new(store, "d0", 3, w, 3, 2, true)?,
                Conv2d::new(store, "d1", w, 2 * w, 3, 2, true)?,
                Conv2d::new(store, "d2", 2 * w, 4 * w, 3, 2, true)?,
            ],
            out: Conv2d::with_init(store, "out", (4 * w, 1, 3, 1), true, Init::Kaiming { fan_in: 36 * w, gain: 1.0 })?,
        })
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let (_, ch, h, w) = image.dims4()?;
        if ch != 3 || h != SCALES[2] || w != SCALES[2] {
            return Err(Error::shape("(N, 3, 112, 112)", image.dims()));
        }
        let mut x = image.clone();
        for c in &self.convs {
            x = lrelu(&c.forward(&x)?)?;
        }
        self.out.forward(&x)
    }

    /// Per-patch probability that the input is a real profile.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(image)?)?)
    }
}
