//! The `key = value` run configuration read by `convtx train`.
//!
//! ```toml
//! [model]
//! preset = "desk"
//! layers = 1
//!
//! [train]
//! steps = 500
//! base_lr = 3e-4
//!
//! [data]
//! preset = "extrapolate"
//! train_count = 64
//! ```
//!
//! Every key is optional. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::{FeedForward, ModelConfig, PosencMode, Preset, UNetWidths};
use crate::synthdata::DataPreset;
use crate::training::{AdamConfig, DecayKind, LossKind, Schedule, Task, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

/// A preset plus optional overrides of individual fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leaky_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub posenc: Option<PosencMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feed_forward: Option<FeedForward>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sffn1: Option<UNetWidths>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sffn2: Option<UNetWidths>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            d_model: None,
            heads: None,
            layers: None,
            embed_layers: None,
            leaky_slope: None,
            groups: None,
            norm_eps: None,
            posenc: None,
            residual: None,
            feed_forward: None,
            sffn1: None,
            sffn2: None,
        }
    }
}

impl ModelSection {
    pub fn preset(&self) -> Result<Preset> {
        self.preset.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn resolve(&self) -> Result<ModelConfig> {
        let base = self.preset()?.config();
        let c = ModelConfig {
            d_model: self.d_model.unwrap_or(base.d_model),
            heads: self.heads.unwrap_or(base.heads),
            layers: self.layers.unwrap_or(base.layers),
            embed_layers: self.embed_layers.unwrap_or(base.embed_layers),
            leaky_slope: self.leaky_slope.unwrap_or(base.leaky_slope),
            groups: self.groups.unwrap_or(base.groups),
            norm_eps: self.norm_eps.unwrap_or(base.norm_eps),
            posenc: self.posenc.unwrap_or(base.posenc),
            residual: self.residual.unwrap_or(base.residual),
            feed_forward: self.feed_forward.unwrap_or(base.feed_forward),
            sffn1: self.sffn1.clone().unwrap_or(base.sffn1),
            sffn2: self.sffn2.clone().unwrap_or(base.sffn2),
        };
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    /// The same section with every field spelled out.
    pub fn expanded(&self) -> Result<Self> {
        let c = self.resolve()?;
        Ok(ModelSection {
            preset: self.preset.clone(),
            d_model: Some(c.d_model),
            heads: Some(c.heads),
            layers: Some(c.layers),
            embed_layers: Some(c.embed_layers),
            leaky_slope: Some(c.leaky_slope),
            groups: Some(c.groups),
            norm_eps: Some(c.norm_eps),
            posenc: Some(c.posenc),
            residual: Some(c.residual),
            feed_forward: Some(c.feed_forward),
            sffn1: Some(c.sffn1),
            sffn2: Some(c.sffn2),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Extrapolate,
    Interpolate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub seed: u64,
    pub precision: Precision,
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
    pub decay: DecayKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub loss: LossKind,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub task: TaskKind,
    /// Input frames per example.
    pub inputs: usize,
    /// Predicted frames per example (extrapolation only).
    pub targets: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = Schedule::default();
        let a = AdamConfig::default();
        TrainSection {
            steps: t.steps,
            seed: t.seed,
            precision: Precision::F32,
            base_lr: s.base_lr,
            decay_rate: s.decay_rate,
            decay_every: s.decay_every,
            decay: s.kind,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            batch: t.batch,
            loss: t.loss,
            eval_every: t.eval_every,
            checkpoint_every: t.checkpoint_every,
            task: TaskKind::Extrapolate,
            inputs: 4,
            targets: 1,
        }
    }
}

impl TrainSection {
    pub fn task(&self) -> Task {
        match self.task {
            TaskKind::Extrapolate => Task::Extrapolate {
                inputs: self.inputs,
                targets: self.targets,
            },
            TaskKind::Interpolate => Task::Interpolate { inputs: self.inputs },
        }
    }

    pub fn resolve(&self) -> Result<TrainConfig> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !(self.decay_rate > 0.0) || self.decay_every == 0 {
            return Err(Error::Config(
                "base_lr, decay_rate and decay_every must be positive".into(),
            ));
        }
        Ok(TrainConfig {
            steps: self.steps,
            seed: self.seed,
            schedule: Schedule {
                base_lr: self.base_lr,
                decay_rate: self.decay_rate,
                decay_every: self.decay_every,
                kind: self.decay,
            },
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            batch: self.batch,
            loss: self.loss,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            task: self.task(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Generator preset used when no manifest is given.
    pub preset: String,
    /// Frame height and width of generated scenes.
    pub size: usize,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    /// A `gen-data` manifest; its `train` and `val` entries replace generation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            preset: "extrapolate".into(),
            size: 16,
            seed: 0,
            train_count: 64,
            val_count: 16,
            manifest: None,
        }
    }
}

impl DataSection {
    pub fn preset(&self) -> Result<DataPreset> {
        self.preset.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.model.resolve()?;
        c.train.resolve()?;
        c.data.preset()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    /// Every key with its effective value, suitable for [`RunConfig::parse`].
    pub fn resolved_toml(&self) -> Result<String> {
        let full = RunConfig {
            model: self.model.expanded()?,
            ..self.clone()
        };
        toml::to_string(&full).map_err(|e| Error::Config(e.to_string()))
    }
}
