//! Networks: optical-flow estimators, the flow-guided generator and its
//! discriminator, the embedding backbone and the fixed loss feature nets.
//!
//! All tensors are `NCHW` with images in `[-1, 1]`.

mod backbone;
mod features;
mod flow;
mod generator;
mod layers;
mod params;
mod warp;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use backbone::{l2_normalize, Backbone, BackboneConfig};
pub use features::{FeatureNetConfig, IdentityNet, PerceptualNet, IDENTITY_TAPS, PERCEPTUAL_TAPS};
pub use flow::{flow_param_count, FlowNet, FlowNetConfig};
pub use generator::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, MultiScaleOutput};
pub use layers::{
    downsample2x, leaky_relu, lrelu, resize_to, upsample2x, BatchNorm, Conv2d, Linear, Mode,
    ResBlock, SelfAttention,
};
pub use params::{Checkpoint, Init, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use warp::{warp, FlowField};

use crate::error::{Error, Result};

/// Output scales of the defrontalization model, coarsest first.
pub const SCALES: [usize; 3] = [28, 56, 112];

/// Flow-network parameter budget of the full preset.
pub const FLOW_PARAM_BUDGET: usize = 7_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub flow: FlowNetConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub backbone: BackboneConfig,
    pub perceptual: FeatureNetConfig,
    pub identity: FeatureNetConfig,
    pub flow_param_budget: usize,
    /// Reject flow networks outside ±20% of `flow_param_budget`.
    pub enforce_flow_budget: bool,
}

impl NetConfig {
    pub fn desk() -> Self {
        Self {
            flow: FlowNetConfig::desk(),
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            backbone: BackboneConfig::desk(),
            perceptual: FeatureNetConfig::desk(),
            identity: FeatureNetConfig::desk(),
            flow_param_budget: FLOW_PARAM_BUDGET,
            enforce_flow_budget: false,
        }
    }

    pub fn full() -> Self {
        Self {
            flow: FlowNetConfig::full(),
            generator: GeneratorConfig::full(),
            discriminator: DiscriminatorConfig::full(),
            backbone: BackboneConfig::full(),
            perceptual: FeatureNetConfig { width: 64, seed: 19 },
            identity: FeatureNetConfig { width: 64, seed: 19 },
            flow_param_budget: FLOW_PARAM_BUDGET,
            enforce_flow_budget: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enforce_flow_budget {
            let n = flow_param_count(&self.flow)? as f64;
            let b = self.flow_param_budget as f64;
            if (n - b).abs() > 0.2 * b {
                return Err(Error::ConfigInvalid(format!(
                    "flow network has {n} parameters, outside ±20% of {b}"
                )));
            }
        }
        Ok(())
    }
}

/// The inference half of the defrontalization model: forward flow network
/// and generator.
pub struct DefrontModel {
    pub flow_store: ParamStore,
    pub flow: FlowNet,
    pub gen_store: ParamStore,
    pub generator: Generator,
}

impl DefrontModel {
    pub const FLOW_SECTION: &'static str = "flow_fwd";
    pub const GEN_SECTION: &'static str = "generator";

    pub fn new(cfg: &NetConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let mut flow_store = ParamStore::new(dtype, device, seed);
        let flow = FlowNet::new(&mut flow_store, &cfg.flow)?;
        let mut gen_store = ParamStore::new(dtype, device, seed.wrapping_add(2));
        let generator = Generator::new(&mut gen_store, &cfg.generator)?;
        Ok(Self {
            flow_store,
            flow,
            gen_store,
            generator,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &NetConfig, device: &Device) -> Result<Self> {
        let dtype = ck
            .tensors
            .values()
            .next()
            .map(|t| t.dtype())
            .unwrap_or(DType::F32);
        let model = Self::new(cfg, dtype, device, 0)?;
        model.flow_store.import(&ck.section(Self::FLOW_SECTION))?;
        model.gen_store.import(&ck.section(Self::GEN_SECTION))?;
        Ok(model)
    }

    pub fn load(path: &Path, cfg: &NetConfig, device: &Device) -> Result<Self> {
        let ck = Checkpoint::load(path, device)?;
        Self::from_checkpoint(&ck, cfg, device).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn synthesize(&self, frontal_half: &Tensor) -> Result<MultiScaleOutput> {
        let flows = self.flow.forward(frontal_half)?;
        self.generator.forward(frontal_half, &flows)
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(format!(
            "{}:{}",
            self.flow_store.fingerprint()?,
            self.gen_store.fingerprint()?
        ))
    }
}
