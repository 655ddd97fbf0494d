use rayon::prelude::*;

use super::schedule::NoiseSchedule;
use crate::denoiser::{predict_x0, Conditioning, DenoiserParams};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Anything that predicts the clean pair from a noised pair.
pub trait X0Model: Sync {
    /// Per-frame feature width of each person.
    fn pose_width(&self) -> usize;
    /// Width of the text embedding the model conditions on.
    fn text_width(&self) -> usize;
    fn predict(&self, xa: &Tensor, xb: &Tensor, cond: &Conditioning) -> Result<(Tensor, Tensor)>;
}

impl X0Model for DenoiserParams {
    fn pose_width(&self) -> usize {
        self.config.d_pose
    }

    fn text_width(&self) -> usize {
        self.config.d_text
    }

    fn predict(&self, xa: &Tensor, xb: &Tensor, cond: &Conditioning) -> Result<(Tensor, Tensor)> {
        predict_x0(self, xa, xb, cond)
    }
}

/// Classifier-free guided prediction `null + w·(cond − null)`.
///
/// With `w = 1` or no text only one branch is evaluated.
pub fn guided_x0<M: X0Model + ?Sized>(
    model: &M,
    xa: &Tensor,
    xb: &Tensor,
    text: Option<&Tensor>,
    step: usize,
    w: f64,
) -> Result<(Tensor, Tensor)> {
    let text_or_zero = || Tensor::zeros(&[1, model.text_width()]);
    match text {
        None => model.predict(xa, xb, &Conditioning::new(text_or_zero(), step).masked()),
        Some(c) => {
            let cond = Conditioning::new(c.clone(), step);
            let (ca, cb) = model.predict(xa, xb, &cond)?;
            if w == 1.0 {
                return Ok((ca, cb));
            }
            let (na, nb) = model.predict(xa, xb, &cond.masked())?;
            Ok((blend(&na, &ca, w), blend(&nb, &cb, w)))
        }
    }
}

fn blend(null: &Tensor, cond: &Tensor, w: f64) -> Tensor {
    let data = null
        .data()
        .iter()
        .zip(cond.data())
        .map(|(n, c)| n + w * (c - n))
        .collect();
    Tensor::from_parts(null.shape().to_vec(), data)
}

/// Descending DDIM visit list `t_k = ((steps − k)·T) / steps`, `k = 0..steps`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!("ddim steps {steps} must be in 1..={total}")));
    }
    Ok((0..steps).map(|k| ((steps - k) * total) / steps).collect())
}

/// Deterministic jump from `x_t` to `x_{t'}` given the predicted clean signal.
pub fn ddim_update(x_t: &Tensor, x0: &Tensor, alpha_bar_t: f64, alpha_bar_next: f64) -> Tensor {
    let (st, nt) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let (sn, nn) = (alpha_bar_next.sqrt(), (1.0 - alpha_bar_next).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&x, &p)| {
            let eps = (x - st * p) / nt;
            sn * p + nn * eps
        })
        .collect();
    Tensor::from_parts(x_t.shape().to_vec(), data)
}

fn initial_noise(len: usize, width: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    if len == 0 {
        return Err(Error::invalid("sample length must be at least 1"));
    }
    Ok((
        Tensor::randn(&[len, width], 1.0, rng),
        Tensor::randn(&[len, width], 1.0, rng),
    ))
}

fn finite(stage: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.is_finite() && b.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(stage))
    }
}

/// Settings shared by the reverse samplers.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSpec<'a> {
    pub len: usize,
    /// Text embedding; `None` samples unconditionally from the null embedding.
    pub text: Option<&'a Tensor>,
    pub guidance_w: f64,
    pub seed: u64,
}

/// Deterministic (η = 0) DDIM sampling of a pair of length `spec.len`.
pub fn ddim_sample<M: X0Model + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    steps: usize,
    spec: &SampleSpec,
) -> Result<(Tensor, Tensor)> {
    let ts = ddim_timesteps(schedule.steps(), steps)?;
    let mut r = rng::stream(spec.seed, "sample");
    let (mut xa, mut xb) = initial_noise(spec.len, model.pose_width(), &mut r)?;
    for (k, &t) in ts.iter().enumerate() {
        let next = ts.get(k + 1).copied().unwrap_or(0);
        let (pa, pb) = guided_x0(model, &xa, &xb, spec.text, t, spec.guidance_w)?;
        let (ab, ab_next) = (schedule.alpha_bar(t), schedule.alpha_bar(next));
        xa = ddim_update(&xa, &pa, ab, ab_next);
        xb = ddim_update(&xb, &pb, ab, ab_next);
        finite("ddim_sample", &xa, &xb)?;
    }
    Ok((xa, xb))
}

/// Ancestral DDPM sampling through every step `T..=1`.
pub fn ddpm_sample<M: X0Model + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    spec: &SampleSpec,
) -> Result<(Tensor, Tensor)> {
    let mut r = rng::stream(spec.seed, "sample");
    let (mut xa, mut xb) = initial_noise(spec.len, model.pose_width(), &mut r)?;
    for t in (1..=schedule.steps()).rev() {
        let (pa, pb) = guided_x0(model, &xa, &xb, spec.text, t, spec.guidance_w)?;
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t - 1);
        let beta = schedule.beta(t);
        let c0 = beta * ab_prev.sqrt() / (1.0 - ab_t);
        let ct = (1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab_t);
        let sigma = if t > 1 {
            (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
        } else {
            0.0
        };
        let mut step = |x: &Tensor, p: &Tensor| -> Tensor {
            let data = x
                .data()
                .iter()
                .zip(p.data())
                .map(|(&x, &p)| {
                    let z = if sigma > 0.0 { rng::normal(&mut r) } else { 0.0 };
                    c0 * p + ct * x + sigma * z
                })
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        xa = step(&xa, &pa);
        xb = step(&xb, &pb);
        finite("ddpm_sample", &xa, &xb)?;
    }
    Ok((xa, xb))
}

/// Per-index sample seed derived from a root seed.
pub fn sample_seed(root: u64, index: u64) -> u64 {
    rng::substream_seed(root, &format!("sample.{index}"))
}

/// DDIM samples for several prompts in parallel, each with its own derived seed.
pub fn ddim_sample_batch<M: X0Model + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    steps: usize,
    len: usize,
    texts: &[Option<Tensor>],
    guidance_w: f64,
    seed: u64,
) -> Result<Vec<(Tensor, Tensor)>> {
    texts
        .par_iter()
        .enumerate()
        .map(|(i, text)| {
            let spec = SampleSpec {
                len,
                text: text.as_ref(),
                guidance_w,
                seed: sample_seed(seed, i as u64),
            };
            ddim_sample(model, schedule, steps, &spec)
        })
        .collect()
}
