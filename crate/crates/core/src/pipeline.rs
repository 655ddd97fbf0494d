//! Glue between the motion corpus, the trainer and the samplers.

use rayon::prelude::*;

use crate::diffusion::{ddim_sample, sample_seed, NoiseSchedule, SampleSpec, TrainExample, X0Model};
use crate::error::{Error, Result};
use crate::motion::{DyadicSample, PoseStats, TextEncoder};
use crate::tensor::Tensor;

/// Normalized training examples, one per sample, carrying every description.
/// Samples without texts train on the null embedding only.
pub fn training_examples(
    samples: &[DyadicSample],
    stats: &PoseStats,
    encoder: &TextEncoder,
) -> Result<Vec<TrainExample>> {
    samples
        .iter()
        .map(|s| {
            let mut texts: Vec<Tensor> = s
                .texts
                .iter()
                .map(|t| encoder.encode(t))
                .filter(|e| !e.null)
                .map(|e| e.to_row())
                .collect();
            if texts.is_empty() {
                texts.push(Tensor::zeros(&[1, encoder.d_text]));
            }
            Ok(TrainExample {
                xa: stats.normalize(&s.a.to_pose())?,
                xb: stats.normalize(&s.b.to_pose())?,
                texts,
            })
        })
        .collect()
}

/// Everything needed to turn a prompt into motion.
pub struct Generator<'a, M: X0Model + ?Sized> {
    pub model: &'a M,
    pub stats: &'a PoseStats,
    pub schedule: &'a NoiseSchedule,
    pub encoder: TextEncoder,
    pub ddim_steps: usize,
    pub guidance_w: f64,
    pub fps: u32,
}

impl<'a, M: X0Model + ?Sized> Generator<'a, M> {
    /// Embeds a prompt; empty prompts yield `None` (null conditioning).
    pub fn embed(&self, prompt: &str) -> Option<Tensor> {
        let e = self.encoder.encode(prompt);
        (!e.null).then(|| e.to_row())
    }

    /// One sample of `len` frames in world units.
    pub fn sample(&self, text: Option<&Tensor>, len: usize, seed: u64, id: &str) -> Result<DyadicSample> {
        if self.stats.width() != self.model.pose_width() {
            return Err(Error::Config(format!(
                "statistics width {} does not match model pose width {}",
                self.stats.width(),
                self.model.pose_width()
            )));
        }
        let spec = SampleSpec {
            len,
            text,
            guidance_w: self.guidance_w,
            seed,
        };
        let (xa, xb) = ddim_sample(self.model, self.schedule, self.ddim_steps, &spec)?;
        DyadicSample::from_poses(
            id,
            &self.stats.denormalize(&xa)?,
            &self.stats.denormalize(&xb)?,
            self.fps,
        )
    }

    /// Samples for several prompts in parallel, the `i`-th seeded by `(seed, i)`.
    pub fn sample_many(&self, texts: &[Option<Tensor>], len: usize, seed: u64) -> Result<Vec<DyadicSample>> {
        texts
            .par_iter()
            .enumerate()
            .map(|(i, t)| self.sample(t.as_ref(), len, sample_seed(seed, i as u64), &format!("gen-{i:05}")))
            .collect()
    }
}
