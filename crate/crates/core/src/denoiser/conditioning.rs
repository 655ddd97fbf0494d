//! Timestep/text conditioning and adaptive layer normalization.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Weight/bias pair of a dense layer, `in × out` and `1 × out`.
#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        LinearParams {
            w: store.add(format!("{name}.weight"), Tensor::uniform(&[d_in, d_out], bound, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out])),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        LinearParams {
            w: store.add(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out])),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound[self.w], Some(bound[self.b]))
    }
}

/// What the network is conditioned on for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Text embedding, `1 × d_text`.
    pub text: Tensor,
    /// Diffusion step.
    pub step: usize,
    /// When set, the text contribution is replaced by the learned null embedding.
    pub mask: bool,
}

impl Conditioning {
    pub fn new(text: Tensor, step: usize) -> Self {
        Conditioning {
            text,
            step,
            mask: false,
        }
    }

    pub fn masked(mut self) -> Self {
        self.mask = true;
        self
    }

    pub fn at_step(&self, step: usize) -> Self {
        Conditioning { step, ..self.clone() }
    }
}

/// Sinusoidal features of a step index, `1 × dim` (sines then cosines).
pub fn sinusoidal_features(step: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = step as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::from_parts(vec![1, dim], out)
}

/// Two-layer MLP applied to the sinusoidal step features.
#[derive(Clone, Copy, Debug)]
pub struct TimeEmbedParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl TimeEmbedParams {
    pub fn init(store: &mut ParamStore, name: &str, d_cond: usize, rng: &mut Rng) -> Self {
        TimeEmbedParams {
            fc1: LinearParams::init(store, &format!("{name}.fc1"), d_cond, d_cond, rng),
            fc2: LinearParams::init(store, &format!("{name}.fc2"), d_cond, d_cond, rng),
        }
    }
}

pub fn embed_timestep(
    tape: &mut Tape,
    bound: &Bound,
    p: &TimeEmbedParams,
    step: usize,
    max_steps: usize,
) -> Result<Var> {
    if step > max_steps {
        return Err(Error::invalid(format!("step {step} outside 0..={max_steps}")));
    }
    let d_cond = tape.value(bound[p.fc1.w]).shape()[0];
    let feats = tape.constant(sinusoidal_features(step, d_cond));
    let h = p.fc1.apply(tape, bound, feats)?;
    let h = tape.silu(h)?;
    p.fc2.apply(tape, bound, h)
}

/// Unified conditioning embedding: the sum of the projected text and step signals.
pub fn combine_conditioning(tape: &mut Tape, c_proj: Var, t_proj: Var) -> Result<Var> {
    tape.add(c_proj, t_proj)
}

/// Projection of the conditioning embedding to per-channel scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct AdaLnParams {
    pub proj: LinearParams,
}

impl AdaLnParams {
    /// Zero-initialized, so modulation starts as the identity.
    pub fn init(store: &mut ParamStore, name: &str, d_cond: usize, width: usize) -> Self {
        AdaLnParams {
            proj: LinearParams::zeros(store, name, d_cond, 2 * width),
        }
    }
}

/// `layernorm(x) ⊙ (1 + scale(emb)) + shift(emb)`, broadcast over frames.
pub fn adaln(tape: &mut Tape, bound: &Bound, p: &AdaLnParams, x: Var, emb: Var) -> Result<Var> {
    let (_, width) = tape.value(x).dims2()?;
    let mods = p.proj.apply(tape, bound, emb)?;
    if tape.value(mods).shape() != [1, 2 * width] {
        return Err(Error::shape(
            "adaln",
            format!("modulation {:?} for width {}", tape.value(mods).shape(), width),
        ));
    }
    let scale = tape.slice_lastdim(mods, 0, width)?;
    let shift = tape.slice_lastdim(mods, width, width)?;
    let gain = tape.offset(scale, 1.0)?;
    let normed = tape.layernorm_nogain(x, LN_EPS)?;
    let scaled = tape.mul_row(normed, gain)?;
    tape.add_row(scaled, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::grad_check;

    #[test]
    fn timestep_embedding_is_deterministic_and_distinguishes_steps() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init");
        let p = TimeEmbedParams::init(&mut store, "time", 64, &mut r);
        let run = |t| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, false);
            let e = embed_timestep(&mut tape, &b, &p, t, 200).unwrap();
            tape.value(e).clone()
        };
        assert_eq!(run(17), run(17));
        let (e0, et) = (run(0), run(200));
        let dist: f64 = e0.data().iter().zip(et.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(dist > 0.0);
        assert!(e0.is_finite() && et.is_finite());

        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        assert!(embed_timestep(&mut tape, &b, &p, 201, 200).is_err());
    }

    #[test]
    fn timestep_mlp_gradients() {
        let mut r = rng::stream(1, "init");
        let d = 64;
        let leaves = vec![
            Tensor::uniform(&[d, d], 0.125, &mut r),
            Tensor::uniform(&[1, d], 0.1, &mut r),
            Tensor::uniform(&[d, d], 0.125, &mut r),
            Tensor::uniform(&[1, d], 0.1, &mut r),
        ];
        let feats = sinusoidal_features(57, d);
        let report = grad_check(
            |tape, v| {
                let f = tape.constant(feats.clone());
                let h = tape.linear(f, v[0], Some(v[1]))?;
                let h = tape.silu(h)?;
                let o = tape.linear(h, v[2], Some(v[3]))?;
                tape.sum(o)
            },
            &leaves,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn combine_is_commutative_and_zero_step_passes_text() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(&[0.3, -1.2, 4.0]).unwrap());
        let b = tape.constant(Tensor::row(&[1.5, 0.25, -2.0]).unwrap());
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        let ab = combine_conditioning(&mut tape, a, b).unwrap();
        let ba = combine_conditioning(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(ab), tape.value(ba));
        let az = combine_conditioning(&mut tape, a, z).unwrap();
        assert_eq!(tape.value(az), tape.value(a));
    }

    #[test]
    fn zero_adaln_is_plain_layernorm() {
        let mut store = ParamStore::new();
        let p = AdaLnParams::init(&mut store, "ada", 6, 4);
        let mut r = rng::stream(2, "x");
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::randn(&[5, 4], 1.0, &mut r));
        let emb = tape.constant(Tensor::randn(&[1, 6], 1.0, &mut r));
        let y = adaln(&mut tape, &bound, &p, x, emb).unwrap();
        let ln = tape.layernorm_nogain(x, LN_EPS).unwrap();
        assert_eq!(tape.value(y), tape.value(ln));
    }

    #[test]
    fn shift_only_modulation_moves_row_mean_by_shift() {
        let mut store = ParamStore::new();
        let p = AdaLnParams::init(&mut store, "ada", 1, 4);
        // emb = [1]; shift bias 0 and shift weights = desired shift values.
        let shift = [0.5, 0.5, 0.5, 0.5];
        let mut w = vec![0.0; 8];
        w[4..].copy_from_slice(&shift);
        store.set(p.proj.w, Tensor::new(&[1, 8], w).unwrap()).unwrap();
        let mut r = rng::stream(3, "x");
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::randn(&[3, 4], 2.0, &mut r));
        let emb = tape.constant(Tensor::row(&[1.0]).unwrap());
        let y = adaln(&mut tape, &bound, &p, x, emb).unwrap();
        for i in 0..3 {
            let mean: f64 = tape.value(y).row_slice(i).iter().sum::<f64>() / 4.0;
            assert!((mean - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn adaln_gradients_reach_embedding() {
        let mut store = ParamStore::new();
        let p = AdaLnParams::init(&mut store, "ada", 3, 4);
        let mut r = rng::stream(4, "x");
        let mut leaves: Vec<Tensor> = vec![
            Tensor::uniform(&[3, 8], 0.5, &mut r),
            Tensor::uniform(&[1, 8], 0.5, &mut r),
        ];
        leaves.push(Tensor::randn(&[5, 4], 1.0, &mut r));
        leaves.push(Tensor::randn(&[1, 3], 1.0, &mut r));
        let report = grad_check(
            |tape, v| {
                let bound = Bound::from_vars(v[..2].to_vec());
                let y = adaln(tape, &bound, &p, v[2], v[3])?;
                let sq = tape.square(y)?;
                tape.sum(sq)
            },
            &leaves,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
