use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the conditioning embedding enters each Mamba module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondMode {
    /// Scale/shift modulation of the normalized input.
    Adaln,
    /// The embedding is prepended as an extra frame and stripped afterwards.
    Prepend,
    Both,
}

/// How the two persons' intermediate streams are merged before the cross module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossMode {
    /// Ordered concatenation followed by a down-projection.
    Concat,
    /// Order-invariant sum followed by an equalizing projection.
    Add,
}

impl CondMode {
    pub const ALL: [CondMode; 3] = [CondMode::Adaln, CondMode::Prepend, CondMode::Both];

    pub fn uses_adaln(self) -> bool {
        matches!(self, CondMode::Adaln | CondMode::Both)
    }

    pub fn uses_prepend(self) -> bool {
        matches!(self, CondMode::Prepend | CondMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CondMode::Adaln => "adaln",
            CondMode::Prepend => "prepend",
            CondMode::Both => "both",
        }
    }
}

impl CrossMode {
    pub const ALL: [CrossMode; 2] = [CrossMode::Concat, CrossMode::Add];

    pub fn as_str(self) -> &'static str {
        match self {
            CrossMode::Concat => "concat",
            CrossMode::Add => "add",
        }
    }
}

impl std::str::FromStr for CondMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaln" => Ok(CondMode::Adaln),
            "prepend" => Ok(CondMode::Prepend),
            "both" => Ok(CondMode::Both),
            other => Err(Error::Config(format!("unknown cond_mode {other:?}"))),
        }
    }
}

impl std::str::FromStr for CrossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(CrossMode::Concat),
            "add" => Ok(CrossMode::Add),
            other => Err(Error::Config(format!("unknown cross_mode {other:?}"))),
        }
    }
}

/// Architecture of the cooperative denoiser. The conditioning width equals `latent_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_blocks: usize,
    pub latent_dim: usize,
    pub d_pose: usize,
    pub d_text: usize,
    pub d_state: usize,
    pub expansion: usize,
    pub conv_k: usize,
    pub cond_mode: CondMode,
    pub cross_mode: CrossMode,
    /// Largest diffusion step the timestep embedding accepts.
    pub max_steps: usize,
}

impl Default for DenoiserConfig {
    /// Desk default: 4 blocks of width 64, AdaLN conditioning, concatenation.
    fn default() -> Self {
        DenoiserConfig {
            n_blocks: 4,
            latent_dim: 64,
            d_pose: 15,
            d_text: 128,
            d_state: 16,
            expansion: 2,
            conv_k: 4,
            cond_mode: CondMode::Adaln,
            cross_mode: CrossMode::Concat,
            max_steps: 200,
        }
    }
}

impl DenoiserConfig {
    pub fn d_cond(&self) -> usize {
        self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_blocks >= 1, "n_blocks must be at least 1"),
            (self.latent_dim >= 2, "latent_dim must be at least 2"),
            (self.latent_dim.is_multiple_of(2), "latent_dim must be even"),
            (self.d_pose >= 1, "d_pose must be at least 1"),
            (self.d_text >= 1, "d_text must be at least 1"),
            (self.d_state >= 1, "d_state must be at least 1"),
            (self.expansion >= 1, "expansion must be at least 1"),
            (self.conv_k >= 1, "conv_k must be at least 1"),
            (self.max_steps >= 1, "max_steps must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Desk-scale model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelPreset {
    #[serde(rename = "S-desk")]
    Small,
    #[serde(rename = "M-desk")]
    Medium,
    #[serde(rename = "L-desk")]
    Large,
}

impl ModelPreset {
    /// `(n_blocks, latent_dim)` for the preset.
    pub fn dims(self) -> (usize, usize) {
        match self {
            ModelPreset::Small => (4, 40),
            ModelPreset::Medium => (4, 64),
            ModelPreset::Large => (6, 96),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelPreset::Small => "S-desk",
            ModelPreset::Medium => "M-desk",
            ModelPreset::Large => "L-desk",
        }
    }
}

impl std::str::FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "S-desk" => Ok(ModelPreset::Small),
            "M" | "M-desk" => Ok(ModelPreset::Medium),
            "L" | "L-desk" => Ok(ModelPreset::Large),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}
