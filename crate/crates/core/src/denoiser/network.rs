use super::conditioning::{
    adaln, combine_conditioning, embed_timestep, AdaLnParams, Conditioning, LinearParams, TimeEmbedParams, LN_EPS,
};
use super::config::{CrossMode, DenoiserConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::ssm::{mamba_module, MambaModuleParams, SsmConfig};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Weights of one cooperative block. Both persons go through the same set.
#[derive(Clone, Debug)]
pub struct CooperativeBlockParams {
    pub adaln_self: Option<AdaLnParams>,
    pub m_self: MambaModuleParams,
    /// Down-projection `2h → h` for concatenation, equalizer `h → h` for addition.
    pub merge: LinearParams,
    pub adaln_cross: Option<AdaLnParams>,
    pub m_cross: MambaModuleParams,
}

/// All learnable weights of the denoiser plus the ids that address them.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    pub input_proj: LinearParams,
    pub output_proj: LinearParams,
    pub time_embed: TimeEmbedParams,
    pub text_proj: LinearParams,
    pub null_text: ParamId,
    pub blocks: Vec<CooperativeBlockParams>,
}

impl DenoiserParams {
    /// Fresh weights drawn from the `init` substream of `seed`.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init");
        let mut store = ParamStore::new();
        let h = config.latent_dim;
        let d_cond = config.d_cond();
        let ssm = SsmConfig {
            expansion: config.expansion,
            conv_k: config.conv_k,
            ..SsmConfig::new(h, config.d_state)
        };

        let input_proj = LinearParams::init(&mut store, "input_proj", config.d_pose, h, &mut r);
        let time_embed = TimeEmbedParams::init(&mut store, "cond.time", d_cond, &mut r);
        let text_proj = LinearParams::init(&mut store, "cond.text", config.d_text, d_cond, &mut r);
        let null_text = store.add("cond.null_text", Tensor::randn(&[1, d_cond], 0.02, &mut r));

        let mut blocks = Vec::with_capacity(config.n_blocks);
        for n in 0..config.n_blocks {
            let prefix = format!("blocks.{n}");
            let uses_adaln = config.cond_mode.uses_adaln();
            let adaln_self =
                uses_adaln.then(|| AdaLnParams::init(&mut store, &format!("{prefix}.adaln_self"), d_cond, h));
            let m_self = MambaModuleParams::init(&mut store, &format!("{prefix}.m_self"), ssm, &mut r);
            let merge = match config.cross_mode {
                CrossMode::Concat => LinearParams::init(&mut store, &format!("{prefix}.down"), 2 * h, h, &mut r),
                CrossMode::Add => LinearParams::init(&mut store, &format!("{prefix}.equalizer"), h, h, &mut r),
            };
            let adaln_cross =
                uses_adaln.then(|| AdaLnParams::init(&mut store, &format!("{prefix}.adaln_cross"), d_cond, h));
            let m_cross = MambaModuleParams::init(&mut store, &format!("{prefix}.m_cross"), ssm, &mut r);
            blocks.push(CooperativeBlockParams {
                adaln_self,
                m_self,
                merge,
                adaln_cross,
                m_cross,
            });
        }
        let output_proj = LinearParams::init(&mut store, "output_proj", h, config.d_pose, &mut r);

        Ok(DenoiserParams {
            config,
            store,
            input_proj,
            output_proj,
            time_embed,
            text_proj,
            null_text,
            blocks,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Closed-form parameter count for a configuration.
    ///
    /// Per Mamba block with `d = expansion·h`, `r = ⌈h/16⌉`, `n = d_state`, `k = conv_k`:
    /// `2dh + 2d + kd + d + d(r + 2n) + rd + d + dn + d + dh + h`.
    /// Per cooperative block: four Mamba blocks, two AdaLN projections `2(2h² + 2h)` when
    /// AdaLN is used, and the merge layer (`2h² + h` concatenation, `h² + h` addition).
    pub fn expected_param_count(config: &DenoiserConfig) -> usize {
        let h = config.latent_dim;
        let d = config.expansion * h;
        let r = h.div_ceil(16);
        let n = config.d_state;
        let k = config.conv_k;
        let mamba = 2 * d * h + 2 * d + k * d + d + d * (r + 2 * n) + r * d + d + d * n + d + d * h + h;
        let adaln = if config.cond_mode.uses_adaln() {
            2 * (2 * h * h + 2 * h)
        } else {
            0
        };
        let merge = match config.cross_mode {
            CrossMode::Concat => 2 * h * h + h,
            CrossMode::Add => h * h + h,
        };
        let per_block = 4 * mamba + adaln + merge;
        let globals = (config.d_pose * h + h)
            + (h * config.d_pose + config.d_pose)
            + 2 * (h * h + h)
            + (config.d_text * h + h)
            + h;
        config.n_blocks * per_block + globals
    }

    /// Silences every cross stage: the merge layer and the cross module's output
    /// projections are zeroed, so the cross stage adds exactly zero.
    pub fn zero_cross_modules(&mut self) {
        for b in &self.blocks {
            for id in [b.merge.w, b.merge.b] {
                let shape = self.store.get(id).shape().to_vec();
                self.store.set(id, Tensor::zeros(&shape)).expect("same shape");
            }
            b.m_cross.zero_output(&mut self.store);
        }
    }
}

fn conditioned_module(
    tape: &mut Tape,
    bound: &Bound,
    config: &DenoiserConfig,
    modulation: Option<&AdaLnParams>,
    module: &MambaModuleParams,
    x: Var,
    emb: Var,
) -> Result<Var> {
    let normed = match modulation {
        Some(p) => adaln(tape, bound, p, x, emb)?,
        None => tape.layernorm_nogain(x, LN_EPS)?,
    };
    if config.cond_mode.uses_prepend() {
        let (len, _) = tape.value(normed).dims2()?;
        let seq = tape.concat_rows(emb, normed)?;
        let out = mamba_module(tape, bound, module, seq)?;
        tape.slice_rows(out, 1, len)
    } else {
        mamba_module(tape, bound, module, normed)
    }
}

/// One cooperative block: per-person self module, then a cross module fed the
/// merged pair, with a residual around the cross stage.
pub fn cooperative_block(
    tape: &mut Tape,
    bound: &Bound,
    config: &DenoiserConfig,
    p: &CooperativeBlockParams,
    xa: Var,
    xb: Var,
    emb: Var,
) -> Result<(Var, Var)> {
    if tape.value(xa).shape() != tape.value(xb).shape() {
        return Err(Error::shape(
            "cooperative_block",
            format!("{:?} vs {:?}", tape.value(xa).shape(), tape.value(xb).shape()),
        ));
    }
    let bar_a = conditioned_module(tape, bound, config, p.adaln_self.as_ref(), &p.m_self, xa, emb)?;
    let bar_b = conditioned_module(tape, bound, config, p.adaln_self.as_ref(), &p.m_self, xb, emb)?;

    let (merged_a, merged_b) = match config.cross_mode {
        CrossMode::Concat => {
            let ab = tape.concat_lastdim(bar_a, bar_b)?;
            let ba = tape.concat_lastdim(bar_b, bar_a)?;
            (p.merge.apply(tape, bound, ab)?, p.merge.apply(tape, bound, ba)?)
        }
        CrossMode::Add => {
            let ab = tape.add(bar_a, bar_b)?;
            let ba = tape.add(bar_b, bar_a)?;
            (p.merge.apply(tape, bound, ab)?, p.merge.apply(tape, bound, ba)?)
        }
    };

    let cross_a = conditioned_module(tape, bound, config, p.adaln_cross.as_ref(), &p.m_cross, merged_a, emb)?;
    let cross_b = conditioned_module(tape, bound, config, p.adaln_cross.as_ref(), &p.m_cross, merged_b, emb)?;
    Ok((tape.add(bar_a, cross_a)?, tape.add(bar_b, cross_b)?))
}

/// Projected step plus projected text (or the learned null embedding when masked), `1 × h`.
pub fn conditioning_embedding(
    tape: &mut Tape,
    bound: &Bound,
    params: &DenoiserParams,
    cond: &Conditioning,
) -> Result<Var> {
    let cfg = &params.config;
    let t_proj = embed_timestep(tape, bound, &params.time_embed, cond.step, cfg.max_steps)?;
    let c_proj = if cond.mask {
        bound[params.null_text]
    } else {
        if cond.text.shape() != [1, cfg.d_text] {
            return Err(Error::shape(
                "conditioning",
                format!("text embedding {:?}, expected [1, {}]", cond.text.shape(), cfg.d_text),
            ));
        }
        let text = tape.constant(cond.text.clone());
        params.text_proj.apply(tape, bound, text)?
    };
    combine_conditioning(tape, c_proj, t_proj)
}

/// Single denoising step: predicts the clean signal of both persons from their
/// `t`-noised versions.
pub fn denoise_step(
    tape: &mut Tape,
    bound: &Bound,
    params: &DenoiserParams,
    xa_t: Var,
    xb_t: Var,
    cond: &Conditioning,
) -> Result<(Var, Var)> {
    let cfg = &params.config;
    if cond.step < 1 || cond.step > cfg.max_steps {
        return Err(Error::invalid(format!(
            "denoise step {} outside 1..={}",
            cond.step, cfg.max_steps
        )));
    }
    let (sa, sb) = (tape.value(xa_t).shape(), tape.value(xb_t).shape());
    if sa != sb || sa.len() != 2 || sa[1] != cfg.d_pose {
        return Err(Error::shape(
            "denoise_step",
            format!("inputs {:?} and {:?}, pose width {}", sa, sb, cfg.d_pose),
        ));
    }
    let emb = conditioning_embedding(tape, bound, params, cond)?;
    let mut ha = params.input_proj.apply(tape, bound, xa_t)?;
    let mut hb = params.input_proj.apply(tape, bound, xb_t)?;
    for block in &params.blocks {
        (ha, hb) = cooperative_block(tape, bound, cfg, block, ha, hb, emb)?;
    }
    let oa = params.output_proj.apply(tape, bound, ha)?;
    let ob = params.output_proj.apply(tape, bound, hb)?;
    Ok((oa, ob))
}

/// Gradient-free prediction of the clean pair.
pub fn predict_x0(
    params: &DenoiserParams,
    xa_t: &Tensor,
    xb_t: &Tensor,
    cond: &Conditioning,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.store.bind(&mut tape, false);
    let a = tape.constant(xa_t.clone());
    let b = tape.constant(xb_t.clone());
    let (oa, ob) = denoise_step(&mut tape, &bound, params, a, b, cond)?;
    Ok((tape.value(oa).clone(), tape.value(ob).clone()))
}
