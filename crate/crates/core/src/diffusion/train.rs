use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::{q_sample, NoiseSchedule};
use crate::denoiser::{denoise_step, Conditioning, DenoiserParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Weights of the auxiliary loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_vel: f64,
    pub lambda_rel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_vel: 1.0,
            lambda_rel: 1.0,
        }
    }
}

/// One normalized training pair with the embeddings of its descriptions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub xa: Tensor,
    pub xb: Tensor,
    /// At least one `1 × d_text` embedding; one is drawn per step.
    pub texts: Vec<Tensor>,
}

/// The random choices made for one example in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub step: usize,
    pub mask: bool,
    pub text_index: usize,
    pub eps_a: Tensor,
    pub eps_b: Tensor,
}

impl NoiseDraw {
    pub fn sample(example: &TrainExample, steps: usize, mask_prob: f64, rng: &mut rng::Rng) -> Self {
        let step = rng.gen_range(1..=steps);
        let mask = rng.gen_bool(mask_prob);
        let text_index = rng.gen_range(0..example.texts.len().max(1));
        let eps_a = Tensor::randn(example.xa.shape(), 1.0, rng);
        let eps_b = Tensor::randn(example.xb.shape(), 1.0, rng);
        NoiseDraw {
            step,
            mask,
            text_index,
            eps_a,
            eps_b,
        }
    }
}

/// Reconstruction, velocity and relative-offset loss of a predicted pair.
///
/// `MSE(a) + MSE(b) + λ_vel·(MSE(Δa) + MSE(Δb)) + λ_rel·MSE(a − b)`. The velocity
/// term is skipped for single-frame sequences.
pub fn dyadic_loss(tape: &mut Tape, pred_a: Var, pred_b: Var, xa: Var, xb: Var, weights: &LossWeights) -> Result<Var> {
    let la = tape.mse(pred_a, xa)?;
    let lb = tape.mse(pred_b, xb)?;
    let mut loss = tape.add(la, lb)?;
    let frames = tape.value(xa).shape()[0];
    if weights.lambda_vel != 0.0 && frames > 1 {
        let mut vel = |p: Var, x: Var| -> Result<Var> {
            let dp = tape.frame_diff(p)?;
            let dx = tape.frame_diff(x)?;
            tape.mse(dp, dx)
        };
        let va = vel(pred_a, xa)?;
        let vb = vel(pred_b, xb)?;
        let v = tape.add(va, vb)?;
        let v = tape.scale(v, weights.lambda_vel)?;
        loss = tape.add(loss, v)?;
    }
    if weights.lambda_rel != 0.0 {
        let rp = tape.sub(pred_a, pred_b)?;
        let rx = tape.sub(xa, xb)?;
        let r = tape.mse(rp, rx)?;
        let r = tape.scale(r, weights.lambda_rel)?;
        loss = tape.add(loss, r)?;
    }
    Ok(loss)
}

/// Loss and parameter gradients for one example under one draw.
pub fn example_loss(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    example: &TrainExample,
    draw: &NoiseDraw,
    weights: &LossWeights,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let xa_t = q_sample(&example.xa, draw.step, &draw.eps_a, schedule)?;
    let xb_t = q_sample(&example.xb, draw.step, &draw.eps_b, schedule)?;
    let text = example
        .texts
        .get(draw.text_index)
        .ok_or_else(|| Error::invalid("training example has no text for the drawn index"))?;
    let mut cond = Conditioning::new(text.clone(), draw.step);
    cond.mask = draw.mask;

    let mut tape = Tape::new();
    let bound = params.store.bind(&mut tape, with_grads);
    let a_t = tape.constant(xa_t);
    let b_t = tape.constant(xb_t);
    let (pa, pb) = denoise_step(&mut tape, &bound, params, a_t, b_t, &cond)?;
    let xa = tape.constant(example.xa.clone());
    let xb = tape.constant(example.xb.clone());
    let loss = dyadic_loss(&mut tape, pa, pb, xa, xb, weights)?;
    let value = tape.value(loss).data()[0];
    if !with_grads {
        return Ok((value, None));
    }
    let mut grads = tape.backward(loss)?;
    let per_param = bound
        .vars()
        .iter()
        .zip(params.store.iter())
        .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, Some(per_param)))
}

/// Mean loss and mean gradients over a batch.
///
/// Examples are processed in parallel; the reduction runs in index order so the
/// result does not depend on scheduling.
pub fn batch_loss(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    batch: &[(&TrainExample, NoiseDraw)],
    weights: &LossWeights,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let results: Vec<(f64, Option<Vec<Tensor>>)> = batch
        .par_iter()
        .map(|(ex, draw)| example_loss(params, schedule, ex, draw, weights, with_grads))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    if !with_grads {
        return Ok((loss, None));
    }
    let mut iter = results.into_iter().map(|r| r.1.expect("gradients requested"));
    let mut total = iter.next().expect("non-empty batch");
    for grads in iter {
        for (acc, g) in total.iter_mut().zip(&grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for g in &mut total {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    Ok((loss, Some(total)))
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// First-order adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &DenoiserParams) -> Self {
        let zeros: Vec<Tensor> = params.store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut DenoiserParams, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(
                "Adam::step",
                format!("{} grads for {} params", grads.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.store.get_mut(id).data_mut();
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub grad_clip: f64,
    #[serde(flatten)]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 200,
            batch_size: 8,
            mask_prob: 0.1,
            grad_clip: 1.0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad("mask_prob must be in [0, 1]");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        if self.weights.lambda_vel < 0.0 || self.weights.lambda_rel < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Cosine-decayed learning rate at optimizer step `step` of `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Model, optimizer state and the counters needed to resume.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: DenoiserParams,
    pub adam: Adam,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
}

/// Summary of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

impl Trainer {
    pub fn new(params: DenoiserParams, schedule: NoiseSchedule, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if schedule.steps() > params.config.max_steps {
            return Err(Error::Config(format!(
                "schedule has {} steps but the model embeds at most {}",
                schedule.steps(),
                params.config.max_steps
            )));
        }
        let adam = Adam::new(&params);
        Ok(Trainer {
            params,
            adam,
            schedule,
            config,
            seed,
            epoch: 0,
        })
    }

    fn batches_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    /// Runs one epoch over `data`: a seeded shuffle, then one step per batch.
    pub fn train_epoch(&mut self, data: &[TrainExample]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let e = self.epoch as u64;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::indexed_stream(self.seed, "train.shuffle", e));
        let total_steps = self.batches_per_epoch(data.len()) * self.config.epochs.max(1) as u64;

        let mut loss_sum = 0.0;
        let mut lr = self.config.lr;
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<(&TrainExample, NoiseDraw)> = chunk
                .iter()
                .map(|&i| {
                    let key = e * data.len() as u64 + i as u64;
                    let mut r = rng::indexed_stream(self.seed, "train.noise", key);
                    let ex = &data[i];
                    (
                        ex,
                        NoiseDraw::sample(ex, self.schedule.steps(), self.config.mask_prob, &mut r),
                    )
                })
                .collect();
            let (loss, grads) = batch_loss(&self.params, &self.schedule, &batch, &self.config.weights, true)?;
            let mut grads = grads.expect("gradients requested");
            clip_grad_norm(&mut grads, self.config.grad_clip);
            lr = cosine_lr(self.config.lr, self.adam.t, total_steps);
            self.adam.step(&mut self.params, &grads, lr)?;
            loss_sum += loss * chunk.len() as f64;
            log::debug!("epoch {} batch {} loss {:.6}", self.epoch, bi, loss);
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: loss_sum / data.len() as f64,
            lr,
        })
    }

    /// Mean loss over `data` under draws fixed by `seed`, without updating anything.
    pub fn evaluate(&self, data: &[TrainExample], seed: u64) -> Result<f64> {
        let batch: Vec<(&TrainExample, NoiseDraw)> = data
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut r = rng::indexed_stream(seed, "train.eval", i as u64);
                (
                    ex,
                    NoiseDraw::sample(ex, self.schedule.steps(), self.config.mask_prob, &mut r),
                )
            })
            .collect();
        Ok(batch_loss(&self.params, &self.schedule, &batch, &self.config.weights, false)?.0)
    }
}
