//! Shared fixtures for the benchmarks.

use dymamba::denoiser::{Conditioning, DenoiserConfig, DenoiserParams, ModelPreset};
use dymamba::rng;
use dymamba::Tensor;

/// Inputs of one selective scan: `u`, `delta`, `a`, `b`, `c`, `d`.
pub struct ScanInputs {
    pub u: Tensor,
    pub delta: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

pub fn scan_inputs(len: usize, channels: usize, states: usize) -> ScanInputs {
    let mut r = rng::stream(len as u64, "bench.scan");
    let delta = Tensor::uniform(&[len, channels], 1.0, &mut r);
    let a = Tensor::uniform(&[channels, states], 1.0, &mut r);
    ScanInputs {
        u: Tensor::randn(&[len, channels], 1.0, &mut r),
        delta: Tensor::new(
            &[len, channels],
            delta.data().iter().map(|v| 0.05 + 0.05 * (v + 1.0)).collect(),
        )
        .expect("finite"),
        a: Tensor::new(&[channels, states], a.data().iter().map(|v| -v.exp()).collect()).expect("finite"),
        b: Tensor::randn(&[len, states], 1.0, &mut r),
        c: Tensor::randn(&[len, states], 1.0, &mut r),
        d: Tensor::randn(&[1, channels], 1.0, &mut r),
    }
}

pub fn preset_model(preset: ModelPreset) -> DenoiserParams {
    let (n_blocks, latent_dim) = preset.dims();
    let config = DenoiserConfig {
        n_blocks,
        latent_dim,
        ..DenoiserConfig::default()
    };
    DenoiserParams::init(config, 0).expect("preset config is valid")
}

/// Noised pair and conditioning for a model at `len` frames.
pub fn denoise_inputs(params: &DenoiserParams, len: usize) -> (Tensor, Tensor, Conditioning) {
    let c = &params.config;
    let mut r = rng::stream(len as u64, "bench.denoise");
    (
        Tensor::randn(&[len, c.d_pose], 1.0, &mut r),
        Tensor::randn(&[len, c.d_pose], 1.0, &mut r),
        Conditioning::new(Tensor::randn(&[1, c.d_text], 1.0, &mut r), c.max_steps / 2),
    )
}
