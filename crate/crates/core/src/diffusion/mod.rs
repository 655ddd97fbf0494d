//! Noise schedule, forward noising, training objective and reverse samplers.

mod sampler;
mod schedule;
mod train;

pub use sampler::{
    ddim_sample, ddim_sample_batch, ddim_timesteps, ddim_update, ddpm_sample, guided_x0, sample_seed, SampleSpec,
    X0Model,
};
pub use schedule::{noise_to, q_sample, NoiseSchedule, COSINE_S, MAX_BETA};
pub use train::{
    batch_loss, clip_grad_norm, cosine_lr, dyadic_loss, example_loss, Adam, EpochStats, LossWeights, NoiseDraw,
    TrainConfig, TrainExample, Trainer,
};

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::denoiser::{CondMode, Conditioning, CrossMode, DenoiserConfig, DenoiserParams};
    use crate::error::Result;
    use crate::rng;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn cosine_schedule_shape() {
        for steps in [200, 1000] {
            let s = NoiseSchedule::cosine(steps).unwrap();
            assert_eq!(s.steps(), steps);
            assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=steps {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "T={steps} t={t}");
                assert!(s.beta(t) > 0.0 && s.beta(t) <= MAX_BETA);
            }
            assert!(s.alpha_bar(steps) > 0.0 && s.alpha_bar(steps) <= 0.01);
        }
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn cosine_schedule_midpoint_value() {
        // T=200, t=100: cos²((0.5+s)/(1+s)·π/2) / cos²(s/(1+s)·π/2), evaluated independently.
        let s = NoiseSchedule::cosine(200).unwrap();
        assert!(
            (s.alpha_bar(100) - 0.493_843_590_440_637_75).abs() < 1e-12,
            "{}",
            s.alpha_bar(100)
        );
    }

    #[test]
    fn q_sample_limits() {
        let mut r = rng::stream(1, "q");
        let x0 = Tensor::randn(&[4, 3], 1.0, &mut r);
        let eps = Tensor::randn(&[4, 3], 1.0, &mut r);
        assert_eq!(noise_to(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(noise_to(&x0, &eps, 0.0).unwrap(), eps);
        let s = NoiseSchedule::cosine(200).unwrap();
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 201, &eps, &s).is_err());
        assert!(q_sample(&x0, 1, &eps, &s).unwrap().max_abs_diff(&x0) < 0.05);
    }

    #[test]
    fn q_sample_variance_matches_schedule() {
        let s = NoiseSchedule::cosine(200).unwrap();
        let mut r = rng::stream(2, "mc");
        let n = 10_000;
        for t in [10, 100, 190] {
            let eps = Tensor::randn(&[n], 1.0, &mut r);
            let xt = q_sample(&Tensor::zeros(&[n]), t, &eps, &s).unwrap();
            let mean = xt.sum() / n as f64;
            let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let expect = 1.0 - s.alpha_bar(t);
            assert!((var / expect - 1.0).abs() < 0.05, "t={t}: {var} vs {expect}");
        }
    }

    #[test]
    fn ddim_visit_list() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*ts.last().unwrap(), 20);
        assert_eq!(ddim_timesteps(200, 200).unwrap(), (1..=200).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(200, 0).is_err());
        assert!(ddim_timesteps(200, 201).is_err());
    }

    /// 1-D linear denoiser `x̂0 = √ᾱ(t)·x_t`.
    struct LinearToy {
        schedule: NoiseSchedule,
    }

    impl X0Model for LinearToy {
        fn pose_width(&self) -> usize {
            1
        }
        fn text_width(&self) -> usize {
            1
        }
        fn predict(&self, xa: &Tensor, xb: &Tensor, cond: &Conditioning) -> Result<(Tensor, Tensor)> {
            let k = self.schedule.alpha_bar(cond.step).sqrt();
            let f = |x: &Tensor| Tensor::new(x.shape(), x.data().iter().map(|v| k * v).collect()).unwrap();
            Ok((f(xa), f(xb)))
        }
    }

    #[test]
    fn ddim_matches_closed_form_on_linear_toy() {
        // With x̂0 = cos θ_t·x_t and ε̂ = sin θ_t·x_t (θ = arccos √ᾱ), each jump
        // multiplies the state by cos(θ_t − θ_t').
        for (total, steps) in [(200, 200), (200, 20), (1000, 50)] {
            let schedule = NoiseSchedule::cosine(total).unwrap();
            let toy = LinearToy {
                schedule: schedule.clone(),
            };
            let text = Tensor::zeros(&[1, 1]);
            let spec = SampleSpec {
                len: 1,
                text: Some(&text),
                guidance_w: 1.0,
                seed: 5,
            };
            let (a, b) = ddim_sample(&toy, &schedule, steps, &spec).unwrap();

            let mut r = rng::stream(5, "sample");
            let (mut ea, mut eb) = (rng::normal(&mut r), rng::normal(&mut r));
            let theta = |t: usize| schedule.alpha_bar(t).sqrt().min(1.0).acos();
            let mut ts = ddim_timesteps(total, steps).unwrap();
            ts.push(0);
            for w in ts.windows(2) {
                let f = (theta(w[0]) - theta(w[1])).cos();
                ea *= f;
                eb *= f;
            }
            assert!(
                (a.data()[0] - ea).abs() < 1e-8,
                "{total}/{steps}: {} vs {ea}",
                a.data()[0]
            );
            assert!((b.data()[0] - eb).abs() < 1e-8);
        }
    }

    #[test]
    fn oracle_prediction_is_recovered_by_final_jump() {
        let s = NoiseSchedule::cosine(200).unwrap();
        let mut r = rng::stream(6, "o");
        let x0 = Tensor::randn(&[7, 3], 1.0, &mut r);
        for t in [1, 50, 200] {
            let eps = Tensor::randn(&[7, 3], 1.0, &mut r);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            assert_eq!(ddim_update(&xt, &x0, s.alpha_bar(t), s.alpha_bar(0)), x0);
        }
    }

    /// Always predicts a fixed target and counts its calls.
    struct Fixed {
        target: Tensor,
        calls: AtomicUsize,
    }

    impl X0Model for Fixed {
        fn pose_width(&self) -> usize {
            self.target.shape()[1]
        }
        fn text_width(&self) -> usize {
            2
        }
        fn predict(&self, _: &Tensor, _: &Tensor, _: &Conditioning) -> Result<(Tensor, Tensor)> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            Ok((self.target.clone(), self.target.clone()))
        }
    }

    #[test]
    fn samplers_land_on_a_constant_prediction() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let target = Tensor::new(&[3, 2], vec![0.5, -1.0, 2.0, 0.0, 0.25, 1.5]).unwrap();
        let model = Fixed {
            target: target.clone(),
            calls: AtomicUsize::new(0),
        };
        let text = Tensor::zeros(&[1, 2]);
        let spec = SampleSpec {
            len: 3,
            text: Some(&text),
            guidance_w: 1.0,
            seed: 0,
        };
        let (a, _) = ddpm_sample(&model, &s, &spec).unwrap();
        assert!(a.max_abs_diff(&target) < 1e-12);
        assert_eq!(model.calls.load(Ordering::Relaxed), 50);
        let (a, _) = ddim_sample(&model, &s, 10, &spec).unwrap();
        assert_eq!(a, target);
        assert_eq!(model.calls.load(Ordering::Relaxed), 60);
        // Guidance other than 1 evaluates the null branch too.
        let guided = SampleSpec {
            guidance_w: 2.0,
            ..spec
        };
        ddim_sample(&model, &s, 10, &guided).unwrap();
        assert_eq!(model.calls.load(Ordering::Relaxed), 80);
    }

    fn tiny_params() -> DenoiserParams {
        let cfg = DenoiserConfig {
            n_blocks: 1,
            latent_dim: 8,
            d_pose: 6,
            d_text: 4,
            d_state: 4,
            cond_mode: CondMode::Adaln,
            cross_mode: CrossMode::Concat,
            max_steps: 50,
            ..DenoiserConfig::default()
        };
        DenoiserParams::init(cfg, 3).unwrap()
    }

    #[test]
    fn ddim_is_deterministic_and_guidance_blends() {
        let p = tiny_params();
        let s = NoiseSchedule::cosine(50).unwrap();
        let text = Tensor::new(&[1, 4], vec![0.5, -0.5, 0.1, 0.9]).unwrap();
        let spec = SampleSpec {
            len: 12,
            text: Some(&text),
            guidance_w: 2.0,
            seed: 42,
        };
        let first = ddim_sample(&p, &s, 10, &spec).unwrap();
        let second = ddim_sample(&p, &s, 10, &spec).unwrap();
        assert_eq!(first, second);
        let other = ddim_sample(
            &p,
            &s,
            10,
            &SampleSpec {
                seed: 43,
                ..spec.clone()
            },
        )
        .unwrap();
        assert!(first.0.max_abs_diff(&other.0) > 0.0);

        let mut r = rng::stream(1, "g");
        let xa = Tensor::randn(&[5, 6], 1.0, &mut r);
        let xb = Tensor::randn(&[5, 6], 1.0, &mut r);
        let cond = Conditioning::new(text.clone(), 20);
        let (ca, _) = p.predict(&xa, &xb, &cond).unwrap();
        let (na, _) = p.predict(&xa, &xb, &cond.clone().masked()).unwrap();
        let (g1, _) = guided_x0(&p, &xa, &xb, Some(&text), 20, 1.0).unwrap();
        assert_eq!(g1, ca);
        let (g3, _) = guided_x0(&p, &xa, &xb, Some(&text), 20, 3.0).unwrap();
        for i in 0..g3.numel() {
            let expect = na.data()[i] + 3.0 * (ca.data()[i] - na.data()[i]);
            assert!((g3.data()[i] - expect).abs() < 1e-12);
        }
        let (u, _) = guided_x0(&p, &xa, &xb, None, 20, 3.0).unwrap();
        assert_eq!(u, na);
    }

    #[test]
    fn batch_sampling_matches_single_calls() {
        let p = tiny_params();
        let s = NoiseSchedule::cosine(50).unwrap();
        let texts = vec![Some(Tensor::ones(&[1, 4])), None, Some(Tensor::zeros(&[1, 4]))];
        let out = ddim_sample_batch(&p, &s, 5, 6, &texts, 2.0, 9).unwrap();
        for (i, text) in texts.iter().enumerate() {
            let spec = SampleSpec {
                len: 6,
                text: text.as_ref(),
                guidance_w: 2.0,
                seed: sample_seed(9, i as u64),
            };
            assert_eq!(out[i], ddim_sample(&p, &s, 5, &spec).unwrap());
        }
    }

    #[test]
    fn sampler_rejects_bad_requests() {
        let p = tiny_params();
        let s = NoiseSchedule::cosine(50).unwrap();
        let spec = SampleSpec {
            len: 0,
            text: None,
            guidance_w: 2.0,
            seed: 0,
        };
        assert!(ddim_sample(&p, &s, 5, &spec).is_err());
        assert!(ddim_sample(&p, &s, 0, &SampleSpec { len: 4, ..spec.clone() }).is_err());
    }

    fn example(len: usize, seed: u64) -> TrainExample {
        let mut r = rng::stream(seed, "ex");
        TrainExample {
            xa: Tensor::randn(&[len, 6], 1.0, &mut r),
            xb: Tensor::randn(&[len, 6], 1.0, &mut r),
            texts: vec![Tensor::randn(&[1, 4], 1.0, &mut r), Tensor::randn(&[1, 4], 1.0, &mut r)],
        }
    }

    #[test]
    fn loss_terms() {
        let ex = example(5, 1);
        let mut tape = Tape::new();
        let xa = tape.constant(ex.xa.clone());
        let xb = tape.constant(ex.xb.clone());
        let zero = dyadic_loss(&mut tape, xa, xb, xa, xb, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(zero).data()[0], 0.0);

        let pa = tape.constant(Tensor::zeros(&[5, 6]));
        let pb = tape.constant(Tensor::zeros(&[5, 6]));
        let plain = LossWeights {
            lambda_vel: 0.0,
            lambda_rel: 0.0,
        };
        let l = dyadic_loss(&mut tape, pa, pb, xa, xb, &plain).unwrap();
        let msq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        let expect = msq(&ex.xa) + msq(&ex.xb);
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-12);

        let one = tape.constant(Tensor::zeros(&[1, 6]));
        let x1 = tape.constant(ex.xa.reshape(&[5, 6]).unwrap());
        let single = tape.slice_rows(x1, 0, 1).unwrap();
        assert!(dyadic_loss(&mut tape, one, one, single, single, &LossWeights::default()).is_ok());
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let mut p = tiny_params();
        let before = p.store.clone();
        let mut adam = Adam::new(&p);
        let grads: Vec<Tensor> = p.store.iter().map(|(_, t)| Tensor::filled(t.shape(), -0.3)).collect();
        adam.step(&mut p, &grads, 1e-2).unwrap();
        for (id, (_, t)) in p.store.ids().zip(before.iter()) {
            let moved = p.store.get(id);
            for (n, o) in moved.data().iter().zip(t.data()) {
                assert!((n - o - 1e-2 * 0.3 / (0.3 + 1e-8)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clipping_and_lr_schedule() {
        let mut g = vec![Tensor::filled(&[2, 2], 3.0), Tensor::filled(&[1], 4.0)];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert!((norm - (36.0f64 + 16.0).sqrt()).abs() < 1e-12);
        let after = g.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!((cosine_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 10, 10).abs() < 1e-18);
    }

    #[test]
    fn one_step_reduces_loss_on_the_same_batch() {
        let params = DenoiserParams::init(DenoiserConfig::default(), 0).unwrap();
        let s = NoiseSchedule::cosine(200).unwrap();
        let cfg = &params.config;
        let mut r = rng::stream(0, "smoke");
        let data: Vec<TrainExample> = (0..2)
            .map(|_| TrainExample {
                xa: Tensor::randn(&[40, cfg.d_pose], 1.0, &mut r),
                xb: Tensor::randn(&[40, cfg.d_pose], 1.0, &mut r),
                texts: vec![Tensor::randn(&[1, cfg.d_text], 0.1, &mut r)],
            })
            .collect();
        let batch: Vec<(&TrainExample, NoiseDraw)> = data
            .iter()
            .map(|ex| (ex, NoiseDraw::sample(ex, 200, 0.1, &mut r)))
            .collect();
        let w = LossWeights::default();
        let (before, grads) = batch_loss(&params, &s, &batch, &w, true).unwrap();
        let mut grads = grads.unwrap();
        clip_grad_norm(&mut grads, 1.0);
        let mut params = params;
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &grads, 1e-3).unwrap();
        let (after, _) = batch_loss(&params, &s, &batch, &w, false).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let data: Vec<TrainExample> = (0..4).map(|i| example(8, 10 + i)).collect();
        let s = NoiseSchedule::cosine(50).unwrap();
        let cfg = TrainConfig {
            lr: 3e-3,
            epochs: 30,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(tiny_params(), s.clone(), cfg.clone(), 7).unwrap();
            let initial = t.evaluate(&data, 99).unwrap();
            for _ in 0..cfg.epochs {
                t.train_epoch(&data).unwrap();
            }
            (initial, t.evaluate(&data, 99).unwrap(), t)
        };
        let (i1, f1, t1) = run();
        let (_, f2, t2) = run();
        assert_eq!(f1, f2);
        assert_eq!(
            t1.params.store.iter().collect::<Vec<_>>(),
            t2.params.store.iter().collect::<Vec<_>>()
        );
        assert_eq!(t1.epoch, 30);
        assert!(f1 < i1, "{f1} !< {i1}");
    }

    #[test]
    fn trainer_rejects_bad_config() {
        let s = NoiseSchedule::cosine(200).unwrap();
        assert!(Trainer::new(tiny_params(), s, TrainConfig::default(), 0).is_err());
        let s = NoiseSchedule::cosine(50).unwrap();
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(Trainer::new(tiny_params(), s, bad, 0).is_err());
    }
}
