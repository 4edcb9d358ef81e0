//! Experiment configuration: one TOML file with a section per module.
//!
//! A file starts from the preset named by its optional top-level `preset`
//! key (`desk` or `full`, default `desk`) and overrides any subset of keys.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::geometry::{default_template, LandmarkSet, LandmarkSource, Point2D};
use crate::losses::{GeneratorObjective, LossWeights, Reduction};
use crate::nets::NetConfig;
use crate::training::{AdamConfig, DefrontTrainConfig, EmbedTrainConfig, FlowPretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_identities: usize,
    pub poses: Vec<f64>,
    pub faces_per_identity: usize,
    pub face_yaw_max: f64,
    pub test_poses: Vec<f64>,
    pub render_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    /// Five `[x, y]` template points: left eye, right eye, nose, left and
    /// right mouth corner.
    pub template: [[f64; 2]; 5],
}

impl GeometrySection {
    pub fn template(&self) -> LandmarkSet {
        LandmarkSet::from_frontal(
            self.template.map(|[x, y]| Point2D::new(x, y)),
            LandmarkSource::Annotation,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossesSection {
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub objective: GeneratorObjective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {
    pub target_fraction: f64,
    pub apply_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub smoothness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefrontSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub generator_adam: AdamConfig,
    pub discriminator_adam: AdamConfig,
    pub train_flows: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSection {
    pub lr0: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub margin_scale: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub flows: FlowSection,
    pub defront: DefrontSection,
    pub embed: EmbedSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub warmup: usize,
    pub iterations: usize,
    pub csv: bool,
    /// Average embeddings of an image and its mirror. Off by default.
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub geometry: GeometrySection,
    pub nets: NetConfig,
    pub losses: LossesSection,
    pub augmentation: AugmentationSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

impl ExperimentConfig {
    /// Reduced widths and schedules that finish on one CPU core.
    pub fn desk() -> Self {
        let template = default_template().frontal_points().expect("five points").map(|p| [p.x, p.y]);
        Self {
            preset: "desk".into(),
            seed: 0,
            output_dir: "runs/desk".into(),
            data: DataSection {
                n_identities: 64,
                poses: vec![0.0, 90.0],
                faces_per_identity: 16,
                face_yaw_max: 30.0,
                test_poses: vec![0.0, 45.0, 90.0, -90.0],
                render_size: 128,
            },
            geometry: GeometrySection { template },
            nets: NetConfig::desk(),
            losses: LossesSection {
                weights: LossWeights::default(),
                reduction: Reduction::Mean,
                objective: GeneratorObjective::NonSaturating,
            },
            augmentation: AugmentationSection {
                target_fraction: 0.2,
                apply_probability: 1.0,
            },
            training: TrainingSection {
                flows: FlowSection {
                    epochs: 5,
                    batch_size: 8,
                    adam: FlowPretrainConfig::default().adam,
                    smoothness: 0.1,
                },
                defront: DefrontSection {
                    epochs: 3,
                    batch_size: 8,
                    generator_adam: AdamConfig {
                        lr: 1e-3,
                        ..AdamConfig::default()
                    },
                    discriminator_adam: AdamConfig::default(),
                    train_flows: false,
                },
                embed: EmbedSection {
                    lr0: 0.1,
                    power: 1.0,
                    weight_decay: 5e-4,
                    momentum: 0.9,
                    epochs: 10,
                    batch_size: 16,
                    accumulation_steps: 2,
                    margin_scale: 32.0,
                    margin: 0.5,
                },
            },
            evaluation: EvaluationSection {
                warmup: 10,
                iterations: 100,
                csv: true,
                flip: false,
            },
        }
    }

    /// Published widths and schedules.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.preset = "full".into();
        c.output_dir = "runs/full".into();
        c.nets = NetConfig::full();
        c.training.defront.epochs = 50;
        c.training.defront.generator_adam = AdamConfig::default();
        c.training.embed = EmbedSection {
            lr0: 0.1,
            power: 1.0,
            weight_decay: 5e-4,
            momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            accumulation_steps: 32,
            margin_scale: 64.0,
            margin: 0.5,
        };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::ConfigInvalid(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::ConfigInvalid(e.to_string()))?;
        let preset = match overrides.get("preset") {
            None => "desk",
            Some(toml::Value::String(s)) => s.as_str(),
            Some(v) => return Err(Error::ConfigInvalid(format!("preset must be a string, got {v}"))),
        };
        let base = toml::Table::try_from(Self::preset(preset)?)
            .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        let merged = merge(base, overrides);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::ConfigInvalid(m) => Error::ConfigInvalid(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.nets.validate()?;
        self.losses.weights.validate()?;
        self.defront_config().validate()?;
        self.embed_config(AugmentationPolicy::baseline(self.seed)).validate()?;
        if self.data.n_identities < 2 {
            return Err(Error::ConfigInvalid("data.n_identities must be >= 2".into()));
        }
        if self.evaluation.warmup < crate::evaluation::MIN_WARMUP
            || self.evaluation.iterations < crate::evaluation::MIN_ITERATIONS
        {
            return Err(Error::ConfigInvalid("evaluation needs >= 10 warmup and >= 100 iterations".into()));
        }
        Ok(())
    }

    pub fn synthetic_dataset(&self) -> crate::data::SyntheticDatasetConfig {
        let mut c = crate::data::SyntheticDatasetConfig::new(self.data.n_identities, &self.data.poses, self.seed);
        c.render_size = self.data.render_size;
        c.faces_per_identity = self.data.faces_per_identity;
        c.face_yaw_max = self.data.face_yaw_max;
        c.test_poses = self.data.test_poses.clone();
        c
    }

    pub fn flow_config(&self) -> FlowPretrainConfig {
        let f = &self.training.flows;
        FlowPretrainConfig {
            epochs: f.epochs,
            batch_size: f.batch_size,
            adam: f.adam.clone(),
            smoothness: f.smoothness,
            seed: self.seed,
        }
    }

    pub fn defront_config(&self) -> DefrontTrainConfig {
        let d = &self.training.defront;
        DefrontTrainConfig {
            epochs: d.epochs,
            batch_size: d.batch_size,
            generator_adam: d.generator_adam.clone(),
            discriminator_adam: d.discriminator_adam.clone(),
            weights: self.losses.weights.clone(),
            reduction: self.losses.reduction,
            objective: self.losses.objective,
            train_flows: d.train_flows,
            seed: self.seed,
        }
    }

    pub fn embed_config(&self, policy: AugmentationPolicy) -> EmbedTrainConfig {
        let e = &self.training.embed;
        EmbedTrainConfig {
            lr0: e.lr0,
            power: e.power,
            weight_decay: e.weight_decay,
            momentum: e.momentum,
            epochs: e.epochs,
            batch_size: e.batch_size,
            accumulation_steps: e.accumulation_steps,
            margin_scale: e.margin_scale,
            margin: e.margin,
            policy,
            seed: self.seed,
        }
    }

    pub fn policy(&self, threshold: Option<f64>) -> AugmentationPolicy {
        AugmentationPolicy {
            error_threshold: threshold,
            apply_probability: self.augmentation.apply_probability,
            target_fraction: self.augmentation.target_fraction,
            rng_seed: self.seed,
        }
    }
}

/// Recursive table merge; values in `over` win.
fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        let next = match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => toml::Value::Table(merge(b, o)),
            (_, v) => v,
        };
        base.insert(k, next);
    }
    base
}
