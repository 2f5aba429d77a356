use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};

pub const DEFAULT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub edge: usize,
    /// Condition channel plus the optional noise channel.
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of down/up levels.
    pub depth: usize,
    pub kernel: usize,
    /// Feed a per-voxel uniform(-1, 1) channel next to the condition.
    pub noise: bool,
    /// Add the condition (mapped through atanh) before the final tanh, so
    /// the network learns a correction to its input.
    pub residual: bool,
    pub slope: f64,
}

impl GeneratorConfig {
    /// Depth 3 for edges of 32 and above, 2 below.
    pub fn for_edge(edge: usize) -> Self {
        GeneratorConfig {
            edge,
            in_channels: 2,
            base_channels: 16,
            depth: if edge >= 32 { 3 } else { 2 },
            kernel: 3,
            noise: true,
            residual: true,
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.depth == 0 {
            return bad("generator depth must be >= 1".into());
        }
        if self.edge == 0 || !self.edge.is_multiple_of(1 << self.depth) {
            return bad(format!("block edge {} is not divisible by 2^{}", self.edge, self.depth));
        }
        if self.in_channels != 1 + self.noise as usize {
            return bad(format!("generator expects {} input channels, config says {}", 1 + self.noise as usize, self.in_channels));
        }
        if self.base_channels == 0 || self.kernel.is_multiple_of(2) {
            return bad("base channels must be >= 1 and the kernel odd".into());
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            return bad(format!("leaky slope must be in [0, 1), got {}", self.slope));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub edge: usize,
    /// Condition plus candidate.
    pub in_channels: usize,
    pub base_channels: usize,
    /// Stride-2 stages before the patch head.
    pub layers: usize,
    pub kernel: usize,
    pub slope: f64,
}

impl DiscriminatorConfig {
    /// Enough stages to bring the patch grid down to 4 per axis.
    pub fn for_edge(edge: usize) -> Self {
        let mut layers = 1;
        while edge >> (layers + 1) >= 4 && edge.is_multiple_of(1 << (layers + 1)) {
            layers += 1;
        }
        DiscriminatorConfig { edge, in_channels: 2, base_channels: 16, layers, kernel: 3, slope: DEFAULT_SLOPE }
    }

    pub fn patch_edge(&self) -> usize {
        self.edge >> self.layers
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.layers == 0 {
            return bad("discriminator needs at least one layer".into());
        }
        if self.edge == 0 || !self.edge.is_multiple_of(1 << self.layers) {
            return bad(format!("block edge {} is not divisible by 2^{}", self.edge, self.layers));
        }
        if self.in_channels != 2 {
            return bad(format!("discriminator takes condition + candidate (2 channels), got {}", self.in_channels));
        }
        if self.base_channels == 0 || self.kernel.is_multiple_of(2) {
            return bad("base channels must be >= 1 and the kernel odd".into());
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            return bad(format!("leaky slope must be in [0, 1), got {}", self.slope));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLossMode {
    /// Minimize `ln(1 - D(G))`.
    Saturating,
    /// Minimize `-ln D(G)`.
    NonSaturating,
}

impl fmt::Display for GeneratorLossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorLossMode::Saturating => "saturating",
            GeneratorLossMode::NonSaturating => "non-saturating",
        })
    }
}

impl FromStr for GeneratorLossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saturating" => Ok(GeneratorLossMode::Saturating),
            "non-saturating" | "nonsaturating" => Ok(GeneratorLossMode::NonSaturating),
            _ => Err(Error::InvalidArgument(format!("unknown generator loss mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_l1: f64,
    pub seed: u64,
    pub generator_loss_mode: GeneratorLossMode,
    pub adam: AdamConfig,
    /// Write a numbered checkpoint every this many epochs; 0 keeps only the
    /// latest.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lambda_l1: 100.0,
            seed: 0,
            generator_loss_mode: GeneratorLossMode::NonSaturating,
            adam: AdamConfig::default(),
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::ConfigInvalid("epochs and batch size must be >= 1".into()));
        }
        if !(self.lambda_l1 >= 0.0) || !self.lambda_l1.is_finite() {
            return Err(Error::ConfigInvalid(format!("lambda_l1 must be finite and >= 0, got {}", self.lambda_l1)));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::ConfigInvalid(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, pairs: usize) -> usize {
        pairs.div_ceil(self.batch_size)
    }
}
