//! Network architecture descriptions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Da3Dqn,
    Da3Iqn,
    Dqn,
    Iqn,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Da3Iqn, Algo::Iqn, Algo::Da3Dqn, Algo::Dqn];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Da3Dqn => "da3-dqn",
            Algo::Da3Iqn => "da3-iqn",
            Algo::Dqn => "dqn",
            Algo::Iqn => "iqn",
        }
    }

    pub fn trunk(self) -> Trunk {
        match self {
            Algo::Da3Dqn | Algo::Da3Iqn => Trunk::Da3,
            Algo::Dqn | Algo::Iqn => Trunk::Conv,
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            Algo::Da3Dqn | Algo::Dqn => HeadKind::Dqn,
            Algo::Da3Iqn | Algo::Iqn => HeadKind::Iqn,
        }
    }

    /// Vanilla DQN bootstraps from the target network's own maximum; every
    /// other variant uses the double-Q target.
    pub fn target_rule(self) -> TargetRule {
        match self {
            Algo::Dqn => TargetRule::Max,
            _ => TargetRule::Double,
        }
    }
}

impl FromStr for Algo {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, CoreError> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown algorithm `{s}`")))
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trunk {
    /// Patch embedder, saliency token and transformer encoder.
    Da3,
    /// Two 3x3 convolutions with 2x2 max pooling, then a dense layer.
    Conv,
    /// The flattened observation itself.
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dqn,
    Iqn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetRule {
    Double,
    Max,
}

/// How the encoder applies its `loops` iterations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopMode {
    /// One block, applied `loops` times.
    #[default]
    Shared,
    /// `loops` distinct blocks.
    Stacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub trunk: Trunk,
    pub head: HeadKind,
    /// Observation channels `N_C`.
    pub channels: usize,
    /// Observation window side `R`.
    pub size: usize,
    pub patch: usize,
    /// Token width `C`.
    pub width: usize,
    pub heads: usize,
    pub loops: usize,
    pub loop_mode: LoopMode,
    pub ff_width: usize,
    /// Hidden width of the head layers; `0` makes them single linear maps.
    pub head_hidden: usize,
    /// Output width of the convolutional trunk's dense layer.
    pub conv_features: usize,
    pub cos_basis: usize,
    pub embed_std: f64,
}

impl NetConfig {
    /// Shipped configuration for `algo` on an `N_C x R x R` input.
    pub fn for_algo(algo: Algo, channels: usize, size: usize) -> Self {
        let width = 64;
        let conv = algo.trunk() == Trunk::Conv;
        Self {
            trunk: algo.trunk(),
            head: algo.head(),
            channels,
            size,
            patch: 1,
            width,
            heads: 4,
            loops: 1,
            loop_mode: LoopMode::Shared,
            ff_width: 2 * width,
            head_hidden: if conv { 0 } else { 64 },
            conv_features: 64,
            cos_basis: 64,
            embed_std: 0.02,
        }
    }

    pub fn with_width(mut self, width: usize, heads: usize) -> Self {
        self.width = width;
        self.heads = heads;
        self.ff_width = 2 * width;
        self
    }

    /// Side of the token grid, `floor(R / P)`.
    pub fn grid(&self) -> usize {
        self.size / self.patch
    }

    /// Patch tokens `T` (the saliency token is extra).
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Width of the vector the head consumes.
    pub fn feature_width(&self) -> usize {
        match self.trunk {
            Trunk::Da3 => self.width,
            Trunk::Conv => self.conv_features,
            Trunk::Flat => self.channels * self.size * self.size,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.channels < 2 || self.size == 0 {
            return bad(format!(
                "input {}x{}x{} is too small",
                self.channels, self.size, self.size
            ));
        }
        match self.trunk {
            Trunk::Da3 => {
                if self.patch == 0 || self.patch > self.size {
                    return bad(format!("patch size {} must lie in 1..={}", self.patch, self.size));
                }
                if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
                    return bad(format!("{} heads do not divide width {}", self.heads, self.width));
                }
                if self.loops == 0 {
                    return bad("encoder needs at least one loop".into());
                }
                if self.ff_width == 0 {
                    return bad("feed-forward width must be positive".into());
                }
            }
            Trunk::Conv => {
                if self.size < 4 {
                    return bad(format!("convolutional trunk needs R >= 4, got {}", self.size));
                }
            }
            Trunk::Flat => {}
        }
        if self.head == HeadKind::Iqn && self.cos_basis == 0 {
            return bad("IQN head needs cosine basis functions".into());
        }
        Ok(())
    }
}
