use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Offset of the cosine schedule.
pub const COSINE_S: f64 = 0.008;
/// Upper clip on per-step betas.
pub const MAX_BETA: f64 = 0.999;

/// Cosine noise schedule over steps `0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    betas: Vec<f64>,
}

fn cosine_f(t: usize, steps: usize) -> f64 {
    let x = ((t as f64 / steps as f64 + COSINE_S) / (1.0 + COSINE_S)) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        let f0 = cosine_f(0, steps);
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| if t == 0 { 1.0 } else { cosine_f(t, steps) / f0 })
            .collect();
        let mut betas = vec![0.0; steps + 1];
        for t in 1..=steps {
            betas[t] = (1.0 - alpha_bar[t] / alpha_bar[t - 1]).min(MAX_BETA);
        }
        Ok(NoiseSchedule { alpha_bar, betas })
    }

    /// Largest step `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Clipped `β(t)` for `1 ≤ t ≤ T`; `β(0)` is zero.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε` for an explicit `ᾱ`.
pub fn noise_to(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "q_sample",
            format!("{:?} vs {:?}", x0.shape(), eps.shape()),
        ));
    }
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| s * x + n * e).collect();
    Ok(Tensor::from_parts(x0.shape().to_vec(), data))
}

/// Forward noising to step `t`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    noise_to(x0, eps, schedule.alpha_bar(t))
}
