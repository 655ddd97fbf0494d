//! The cooperative two-person denoiser.
//!
//! Each person's noised pose sequence is projected to width `h`, passed through
//! `N` cooperative blocks that share one weight set between the persons, and
//! projected back to pose width. The network predicts the clean signal.

mod conditioning;
mod config;
mod network;

pub use conditioning::{
    adaln, combine_conditioning, embed_timestep, sinusoidal_features, AdaLnParams, Conditioning, LinearParams,
    TimeEmbedParams, LN_EPS,
};
pub use config::{CondMode, CrossMode, DenoiserConfig, ModelPreset};
pub use network::{
    conditioning_embedding, cooperative_block, denoise_step, predict_x0, CooperativeBlockParams, DenoiserParams,
};
