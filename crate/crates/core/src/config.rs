//! Run configuration: every tunable of a run in one TOML-serializable value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{CondMode, CrossMode, DenoiserConfig, ModelPreset};
use crate::diffusion::{NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::motion::{TextEncoder, D_POSE};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: ModelPreset,
    /// Overrides the preset's block count.
    pub n_blocks: Option<usize>,
    /// Overrides the preset's latent width.
    pub latent_dim: Option<usize>,
    pub d_state: usize,
    pub expansion: usize,
    pub conv_k: usize,
    pub cond_mode: CondMode,
    pub cross_mode: CrossMode,
    pub d_text: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: ModelPreset::Medium,
            n_blocks: None,
            latent_dim: None,
            d_state: 16,
            expansion: 2,
            conv_k: 4,
            cond_mode: CondMode::Adaln,
            cross_mode: CrossMode::Concat,
            d_text: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    /// Training diffusion steps `T`.
    pub steps: usize,
    pub ddim_steps: usize,
    pub guidance_w: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            steps: 200,
            ddim_steps: 20,
            guidance_w: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_samples: usize,
    /// Training sequence length in frames.
    pub train_len: usize,
    pub fps: u32,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_samples: 200,
            train_len: 40,
            fps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            corpus: PathBuf::from("runs/corpus"),
            checkpoint: PathBuf::from("runs/checkpoint"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stream of the run is a named substream of it.
    pub seed: u64,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalConfig,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn n_blocks(&self) -> usize {
        self.model.n_blocks.unwrap_or(self.model.preset.dims().0)
    }

    pub fn latent_dim(&self) -> usize {
        self.model.latent_dim.unwrap_or(self.model.preset.dims().1)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            n_blocks: self.n_blocks(),
            latent_dim: self.latent_dim(),
            d_pose: D_POSE,
            d_text: self.model.d_text,
            d_state: self.model.d_state,
            expansion: self.model.expansion,
            conv_k: self.model.conv_k,
            cond_mode: self.model.cond_mode,
            cross_mode: self.model.cross_mode,
            max_steps: self.diffusion.steps,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.diffusion.steps)
    }

    /// The run's text encoder, seeded from the `text` substream.
    pub fn encoder(&self) -> TextEncoder {
        TextEncoder::new(self.model.d_text, rng::substream_seed(self.seed, "text"))
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser_config().validate()?;
        self.train.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.diffusion.steps == 0 {
            return bad("diffusion.steps must be at least 1");
        }
        if self.diffusion.ddim_steps == 0 || self.diffusion.ddim_steps > self.diffusion.steps {
            return bad("diffusion.ddim_steps must be in 1..=diffusion.steps");
        }
        if !self.diffusion.guidance_w.is_finite() {
            return bad("diffusion.guidance_w must be finite");
        }
        if self.data.train_len < 2 {
            return bad("data.train_len must be at least 2");
        }
        if self.data.fps == 0 {
            return bad("data.fps must be positive");
        }
        if self.eval.multipliers.is_empty() || self.eval.multipliers.contains(&0) {
            return bad("eval.multipliers must be non-empty and positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.denoiser_config(), DenoiserConfig::default());
    }

    #[test]
    fn overrides_beat_the_preset() {
        let c = RunConfig::from_toml_str(
            "seed = 3\n[model]\npreset = \"L-desk\"\nlatent_dim = 32\ncond_mode = \"prepend\"\n[train]\nlambda_vel = 0.5\n",
        )
        .unwrap();
        assert_eq!((c.n_blocks(), c.latent_dim()), (6, 32));
        assert_eq!(c.model.cond_mode, CondMode::Prepend);
        assert_eq!(c.train.weights.lambda_vel, 0.5);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "[model]\nlatent_dim = 7\n",
            "[diffusion]\nddim_steps = 500\n",
            "[data]\ntrain_len = 1\n",
            "[train]\nlr = -1.0\n",
            "[model]\nunknown = 1\n",
            "seed = \"x\"\n",
        ] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert_eq!(err.kind(), crate::ErrorKind::Config, "{text}");
        }
    }
}
