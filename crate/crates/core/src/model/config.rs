use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosencMode {
    /// Added once, right after the embedding.
    Once,
    /// Added after the embedding and again at the input of every later
    /// encoder and decoder layer.
    PerLayer,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedForward {
    /// One 3×3 convolution followed by the leaky activation.
    Single,
    /// Conv, activation, conv.
    Double,
}

/// Channel widths of one U-shaped synthesis stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetWidths {
    /// Output channels of each down block (two 3×3 convs each).
    pub down: Vec<usize>,
    /// Output channels of each up block (upsample, concat skip, two 3×3 convs).
    pub up: Vec<usize>,
    /// Extra 3×3 convs before the final 1×1 projection to RGB.
    #[serde(default)]
    pub head: Vec<usize>,
}

impl UNetWidths {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.down.is_empty() {
            return Err(Error::Config(format!("{name}: needs at least one down block")));
        }
        if self.up.len() > self.down.len() {
            return Err(Error::Config(format!(
                "{name}: {} up blocks but only {} down blocks",
                self.up.len(),
                self.down.len()
            )));
        }
        if self.down.iter().chain(&self.up).chain(&self.head).any(|&c| c == 0) {
            return Err(Error::Config(format!("{name}: zero channel width")));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn divisibility(&self) -> usize {
        1 << self.up.len()
    }
}

/// Every architectural hyperparameter of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    #[serde(default = "defaults::embed_layers")]
    pub embed_layers: usize,
    #[serde(default = "defaults::leaky_slope")]
    pub leaky_slope: f64,
    /// Group-norm group count; 0 means `min(8, d_model)`.
    #[serde(default)]
    pub groups: usize,
    #[serde(default = "defaults::norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "defaults::posenc")]
    pub posenc: PosencMode,
    #[serde(default = "defaults::yes")]
    pub residual: bool,
    #[serde(default = "defaults::feed_forward")]
    pub feed_forward: FeedForward,
    pub sffn1: UNetWidths,
    pub sffn2: UNetWidths,
}

mod defaults {
    use super::{FeedForward, PosencMode};

    pub fn embed_layers() -> usize {
        4
    }
    pub fn leaky_slope() -> f64 {
        0.1
    }
    pub fn norm_eps() -> f64 {
        1e-5
    }
    pub fn posenc() -> PosencMode {
        PosencMode::PerLayer
    }
    pub fn yes() -> bool {
        true
    }
    pub fn feed_forward() -> FeedForward {
        FeedForward::Single
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Reference,
    Desk,
    Micro,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Preset::Reference),
            "desk" => Ok(Preset::Desk),
            "micro" => Ok(Preset::Micro),
            _ => Err(Error::Config(format!(
                "unknown preset `{s}` (expected reference, desk or micro)"
            ))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Reference => "reference",
            Preset::Desk => "desk",
            Preset::Micro => "micro",
        }
    }

    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Reference => ModelConfig::reference(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Micro => ModelConfig::micro(),
        }
    }

    /// Frame extent the preset is meant to run on.
    pub fn frame_size(self) -> usize {
        match self {
            Preset::Reference => 64,
            Preset::Desk => 16,
            Preset::Micro => 8,
        }
    }
}

impl ModelConfig {
    fn base(d_model: usize, heads: usize, layers: usize, sffn1: UNetWidths, sffn2: UNetWidths) -> Self {
        ModelConfig {
            d_model,
            heads,
            layers,
            embed_layers: defaults::embed_layers(),
            leaky_slope: defaults::leaky_slope(),
            groups: 0,
            norm_eps: defaults::norm_eps(),
            posenc: defaults::posenc(),
            residual: true,
            feed_forward: defaults::feed_forward(),
            sffn1,
            sffn2,
        }
    }

    /// Full-size configuration: 128 channels, 4 heads, 7 encoder and 7 decoder layers.
    pub fn reference() -> Self {
        Self::base(
            128,
            4,
            7,
            UNetWidths {
                down: vec![256, 512],
                up: vec![256, 128],
                head: vec![64, 32],
            },
            UNetWidths {
                down: vec![32, 64, 128, 256, 512],
                up: vec![256, 128, 64, 32],
                head: vec![],
            },
        )
    }

    /// CPU-sized configuration for 16×16 frames.
    pub fn desk() -> Self {
        Self::base(
            16,
            2,
            2,
            UNetWidths {
                down: vec![128, 256],
                up: vec![128, 64],
                head: vec![32, 16],
            },
            UNetWidths {
                down: vec![16, 32, 64, 128, 256],
                up: vec![128, 64, 32, 16],
                head: vec![],
            },
        )
    }

    /// Smallest configuration that still exercises every code path; 8×8 frames.
    pub fn micro() -> Self {
        Self::base(
            4,
            2,
            1,
            UNetWidths {
                down: vec![4, 8],
                up: vec![8, 4],
                head: vec![4],
            },
            UNetWidths {
                down: vec![4, 4, 8],
                up: vec![4, 4],
                head: vec![],
            },
        )
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn norm_groups(&self) -> usize {
        if self.groups == 0 {
            self.d_model.min(8)
        } else {
            self.groups
        }
    }

    /// Frame height and width must be multiples of this.
    pub fn divisibility(&self) -> usize {
        self.sffn1.divisibility().max(self.sffn2.divisibility())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model must be even and positive (got {})",
                self.d_model
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.embed_layers == 0 {
            return Err(Error::Config("embed_layers must be at least 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0, 1) (got {})",
                self.leaky_slope
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if self.d_model % self.norm_groups() != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} norm groups",
                self.d_model,
                self.norm_groups()
            )));
        }
        self.sffn1.validate("sffn1")?;
        self.sffn2.validate("sffn2")
    }

    pub fn check_frame_size(&self, h: usize, w: usize) -> Result<()> {
        let k = self.divisibility();
        if h == 0 || w == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::invalid(format!(
                "frame size {h}x{w} is not a multiple of {k} required by the synthesis pooling stack"
            )));
        }
        Ok(())
    }
}
