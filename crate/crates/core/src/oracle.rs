//! Oracle suites run by the `grad-check` command and the acceptance tests.
//!
//! Every differentiable op is checked against finite differences on seeded
//! random inputs. Primitives use the central stencil; deep compositions use
//! the five-point stencil with parameters redrawn in `[-0.5, 0.5)`.

use crate::denoiser::{
    adaln, cooperative_block, denoise_step, embed_timestep, AdaLnParams, CondMode, Conditioning, CrossMode,
    DenoiserConfig, DenoiserParams, TimeEmbedParams,
};
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::ssm::{
    mamba_block, mamba_module, selective_scan_chunked, unrolled_scan_reference, MambaModuleParams, SsmConfig,
};
use crate::tensor::{grad_check_contracted, Bound, GradCheckReport, ParamStore, Stencil, Tape, Tensor, Var, FD_STEP};

pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Five-point step for composite checks. Differences are contracted per output
/// element, which lowers rounding noise enough for a smaller step than the
/// scalar form needs.
pub const COMPOSITE_STEP: f64 = 2e-3;
pub const SCAN_TOLERANCE: f64 = 1e-10;

/// Worst error of one check over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub name: String,
    pub max_error: f64,
    pub cases: usize,
    pub tolerance: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn positive(shape: &[usize], r: &mut Rng) -> Tensor {
    let raw = Tensor::uniform(shape, 1.0, r);
    Tensor::new(shape, raw.data().iter().map(|v| 0.05 + 0.5 * (v + 1.0)).collect()).expect("finite")
}

fn randomized(store: &ParamStore, r: &mut Rng) -> Vec<Tensor> {
    store.iter().map(|(_, t)| Tensor::uniform(t.shape(), 0.5, r)).collect()
}

type Case = (Vec<Tensor>, Stencil);
type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct GradCheck {
    name: &'static str,
    build: fn(u64) -> (Case, Objective),
}

fn central(leaves: Vec<Tensor>) -> Case {
    (leaves, Stencil::Central(FD_STEP))
}

fn five_point(leaves: Vec<Tensor>) -> Case {
    (leaves, Stencil::FivePoint(COMPOSITE_STEP))
}

fn unary(seed: u64, name: &str, op: fn(&mut Tape, Var) -> Result<Var>) -> (Case, Objective) {
    let mut r = rng::stream(seed, name);
    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    (central(vec![x]), Box::new(move |t, v| op(t, v[0])))
}

fn binary(
    seed: u64,
    name: &str,
    shapes: [&[usize]; 2],
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> (Case, Objective) {
    let mut r = rng::stream(seed, name);
    let leaves = vec![
        Tensor::randn(shapes[0], 1.0, &mut r),
        Tensor::randn(shapes[1], 1.0, &mut r),
    ];
    (central(leaves), Box::new(move |t, v| op(t, v[0], v[1])))
}

fn tiny_denoiser(cond_mode: CondMode, cross_mode: CrossMode) -> DenoiserConfig {
    DenoiserConfig {
        n_blocks: 1,
        latent_dim: 4,
        d_pose: 6,
        d_text: 5,
        d_state: 2,
        cond_mode,
        cross_mode,
        max_steps: 50,
        ..DenoiserConfig::default()
    }
}

fn block_case(seed: u64, cross: CrossMode) -> (Case, Objective) {
    let cfg = tiny_denoiser(CondMode::Both, cross);
    let params = DenoiserParams::init(cfg.clone(), seed).expect("valid config");
    let mut r = rng::stream(seed, "oracle.block");
    let mut leaves = randomized(&params.store, &mut r);
    let n = leaves.len();
    leaves.push(Tensor::randn(&[4, 4], 1.0, &mut r));
    leaves.push(Tensor::randn(&[4, 4], 1.0, &mut r));
    leaves.push(Tensor::randn(&[1, 4], 1.0, &mut r));
    let block = params.blocks[0].clone();
    (
        five_point(leaves),
        Box::new(move |t, v| {
            let bound = Bound::from_vars(v[..n].to_vec());
            let (ya, yb) = cooperative_block(t, &bound, &cfg, &block, v[n], v[n + 1], v[n + 2])?;
            t.concat_lastdim(ya, yb)
        }),
    )
}

fn step_case(seed: u64, cond_mode: CondMode) -> (Case, Objective) {
    let mut params = DenoiserParams::init(tiny_denoiser(cond_mode, CrossMode::Concat), seed).expect("valid config");
    let mut r = rng::stream(seed, "oracle.step");
    let mut leaves = randomized(&params.store, &mut r);
    let n = leaves.len();
    let ids: Vec<_> = params.store.ids().collect();
    for (id, t) in ids.into_iter().zip(&leaves) {
        params.store.set(id, t.clone()).expect("same shape");
    }
    leaves.push(Tensor::randn(&[5, 6], 1.0, &mut r));
    leaves.push(Tensor::randn(&[5, 6], 1.0, &mut r));
    let cond = Conditioning::new(Tensor::randn(&[1, 5], 1.0, &mut r), 1 + (seed % 50) as usize);
    (
        five_point(leaves),
        Box::new(move |t, v| {
            let bound = Bound::from_vars(v[..n].to_vec());
            let (oa, ob) = denoise_step(t, &bound, &params, v[n], v[n + 1], &cond)?;
            t.concat_lastdim(oa, ob)
        }),
    )
}

fn mamba_case(seed: u64, whole_module: bool) -> (Case, Objective) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, "oracle.mamba");
    let p = MambaModuleParams::init(&mut store, "m", SsmConfig::new(4, 2), &mut r);
    let mut leaves = randomized(&store, &mut r);
    let n = leaves.len();
    leaves.push(Tensor::randn(&[6, 4], 1.0, &mut r));
    (
        five_point(leaves),
        Box::new(move |t, v| {
            let bound = Bound::from_vars(v[..n].to_vec());
            if whole_module {
                mamba_module(t, &bound, &p, v[n])
            } else {
                mamba_block(t, &bound, &p.block1, v[n])
            }
        }),
    )
}

const GRAD_CHECKS: &[GradCheck] = &[
    GradCheck {
        name: "matmul",
        build: |s| binary(s, "matmul", [&[3, 4], &[4, 2]], Tape::matmul),
    },
    GradCheck {
        name: "linear",
        build: |s| {
            let mut r = rng::stream(s, "linear");
            let leaves = vec![
                Tensor::randn(&[3, 4], 1.0, &mut r),
                Tensor::randn(&[4, 2], 1.0, &mut r),
                Tensor::randn(&[1, 2], 1.0, &mut r),
            ];
            (central(leaves), Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))))
        },
    },
    GradCheck {
        name: "add",
        build: |s| binary(s, "add", [&[3, 4], &[3, 4]], Tape::add),
    },
    GradCheck {
        name: "sub",
        build: |s| binary(s, "sub", [&[3, 4], &[3, 4]], Tape::sub),
    },
    GradCheck {
        name: "mul",
        build: |s| binary(s, "mul", [&[3, 4], &[3, 4]], Tape::mul),
    },
    GradCheck {
        name: "add_row",
        build: |s| binary(s, "add_row", [&[3, 4], &[1, 4]], Tape::add_row),
    },
    GradCheck {
        name: "mul_row",
        build: |s| binary(s, "mul_row", [&[3, 4], &[1, 4]], Tape::mul_row),
    },
    GradCheck {
        name: "scale",
        build: |s| unary(s, "scale", |t, x| t.scale(x, -1.7)),
    },
    GradCheck {
        name: "offset",
        build: |s| unary(s, "offset", |t, x| t.offset(x, 0.3)),
    },
    GradCheck {
        name: "silu",
        build: |s| unary(s, "silu", Tape::silu),
    },
    GradCheck {
        name: "softplus",
        build: |s| unary(s, "softplus", Tape::softplus),
    },
    GradCheck {
        name: "sigmoid",
        build: |s| unary(s, "sigmoid", Tape::sigmoid),
    },
    GradCheck {
        name: "neg_exp",
        build: |s| unary(s, "neg_exp", Tape::neg_exp),
    },
    GradCheck {
        name: "square",
        build: |s| unary(s, "square", Tape::square),
    },
    GradCheck {
        name: "layernorm",
        build: |s| unary(s, "layernorm", |t, x| t.layernorm_nogain(x, 1e-5)),
    },
    GradCheck {
        name: "frame_diff",
        build: |s| unary(s, "frame_diff", Tape::frame_diff),
    },
    GradCheck {
        name: "mean",
        build: |s| unary(s, "mean", Tape::mean),
    },
    GradCheck {
        name: "mse",
        build: |s| binary(s, "mse", [&[3, 4], &[3, 4]], Tape::mse),
    },
    GradCheck {
        name: "depthwise_conv1d",
        build: |s| binary(s, "conv", [&[6, 3], &[4, 3]], Tape::depthwise_conv1d),
    },
    GradCheck {
        name: "concat_slice",
        build: |s| {
            binary(s, "concat", [&[3, 2], &[3, 4]], |t, a, b| {
                let c = t.concat_lastdim(a, b)?;
                let rows = t.concat_rows(c, c)?;
                let mid = t.slice_rows(rows, 1, 4)?;
                t.slice_lastdim(mid, 1, 4)
            })
        },
    },
    GradCheck {
        name: "selective_scan",
        build: |s| {
            let mut r = rng::stream(s, "scan");
            let (len, dc, ds) = (8, 3, 2);
            let a = Tensor::uniform(&[dc, ds], 1.0, &mut r);
            let leaves = vec![
                Tensor::randn(&[len, dc], 1.0, &mut r),
                positive(&[len, dc], &mut r),
                Tensor::new(&[dc, ds], a.data().iter().map(|v| -v.exp()).collect()).expect("finite"),
                Tensor::randn(&[len, ds], 1.0, &mut r),
                Tensor::randn(&[len, ds], 1.0, &mut r),
                Tensor::randn(&[1, dc], 1.0, &mut r),
            ];
            (
                central(leaves),
                Box::new(|t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])),
            )
        },
    },
    GradCheck {
        name: "mamba_block",
        build: |s| mamba_case(s, false),
    },
    GradCheck {
        name: "mamba_module",
        build: |s| mamba_case(s, true),
    },
    GradCheck {
        name: "adaln",
        build: |s| {
            let mut store = ParamStore::new();
            let p = AdaLnParams::init(&mut store, "ada", 3, 4);
            let mut r = rng::stream(s, "adaln");
            let mut leaves = randomized(&store, &mut r);
            leaves.push(Tensor::randn(&[5, 4], 1.0, &mut r));
            leaves.push(Tensor::randn(&[1, 3], 1.0, &mut r));
            (
                central(leaves),
                Box::new(move |t, v| {
                    let bound = Bound::from_vars(v[..2].to_vec());
                    adaln(t, &bound, &p, v[2], v[3])
                }),
            )
        },
    },
    GradCheck {
        name: "timestep_embedding",
        build: |s| {
            let mut store = ParamStore::new();
            let mut r = rng::stream(s, "time");
            let p = TimeEmbedParams::init(&mut store, "time", 6, &mut r);
            let leaves = randomized(&store, &mut r);
            let step = 1 + (s % 100) as usize;
            (
                central(leaves),
                Box::new(move |t, v| {
                    let bound = Bound::from_vars(v.to_vec());
                    embed_timestep(t, &bound, &p, step, 100)
                }),
            )
        },
    },
    GradCheck {
        name: "cooperative_block_concat",
        build: |s| block_case(s, CrossMode::Concat),
    },
    GradCheck {
        name: "cooperative_block_add",
        build: |s| block_case(s, CrossMode::Add),
    },
    GradCheck {
        name: "denoise_step_adaln",
        build: |s| step_case(s, CondMode::Adaln),
    },
    GradCheck {
        name: "denoise_step_prepend",
        build: |s| step_case(s, CondMode::Prepend),
    },
    GradCheck {
        name: "denoise_step_both",
        build: |s| step_case(s, CondMode::Both),
    },
];

/// Checks `Σ w ⊙ f` with a random cotangent `w` of the output's shape.
fn run_check(check: &GradCheck, seed: u64, stencil: Option<Stencil>) -> Result<GradCheckReport> {
    let ((leaves, default_stencil), f) = (check.build)(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let w = Tensor::randn(tape.value(y).shape(), 1.0, &mut rng::stream(seed, "oracle.cotangent"));
    grad_check_contracted(
        |t: &mut Tape, v: &[Var]| f(t, v),
        &leaves,
        &w,
        stencil.unwrap_or(default_stencil),
    )
}

/// Names of the gradient checks, in the order [`grad_suite`] reports them.
pub fn grad_check_names() -> Vec<&'static str> {
    GRAD_CHECKS.iter().map(|c| c.name).collect()
}

/// Runs every gradient check on every seed.
pub fn grad_suite(seeds: &[u64]) -> Result<Vec<OracleResult>> {
    GRAD_CHECKS
        .iter()
        .map(|check| {
            let mut max_error: f64 = 0.0;
            for &seed in seeds {
                let report = run_check(check, seed, None)?;
                max_error = max_error.max(report.max_rel_error);
            }
            Ok(OracleResult {
                name: check.name.to_string(),
                max_error,
                cases: seeds.len(),
                tolerance: GRAD_TOLERANCE,
            })
        })
        .collect()
}

/// Compares the scan kernel with the unrolled recurrence and with the chunked
/// evaluation (chunks 1, 3, 7 and `L`) on random instances with `L ≤ 64`.
pub fn scan_suite(seeds: &[u64]) -> Result<Vec<OracleResult>> {
    let mut unrolled: f64 = 0.0;
    let mut chunked: f64 = 0.0;
    for &seed in seeds {
        let mut r = rng::stream(seed, "oracle.scan");
        use rand::Rng as _;
        let len = r.gen_range(1..=64);
        let dc = r.gen_range(1..=6);
        let ds = r.gen_range(1..=5);
        let a = Tensor::uniform(&[dc, ds], 1.0, &mut r);
        let u = Tensor::randn(&[len, dc], 1.0, &mut r);
        let delta = positive(&[len, dc], &mut r);
        let a = Tensor::new(&[dc, ds], a.data().iter().map(|v| -v.exp()).collect()).expect("finite");
        let b = Tensor::randn(&[len, ds], 1.0, &mut r);
        let c = Tensor::randn(&[len, ds], 1.0, &mut r);
        let d = Tensor::randn(&[1, dc], 1.0, &mut r);

        let mut tape = Tape::new();
        let v: Vec<Var> = [&u, &delta, &a, &b, &c, &d]
            .iter()
            .map(|t| tape.constant((*t).clone()))
            .collect();
        let yv = tape.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?;
        let y = tape.value(yv);
        unrolled = unrolled.max(y.max_abs_diff(&unrolled_scan_reference(&u, &delta, &a, &b, &c, &d)?));
        for chunk in [1, 3, 7, len] {
            chunked = chunked.max(y.max_abs_diff(&selective_scan_chunked(&u, &delta, &a, &b, &c, &d, chunk)?));
        }
    }
    Ok(vec![
        OracleResult {
            name: "scan_vs_unrolled".into(),
            max_error: unrolled,
            cases: seeds.len(),
            tolerance: SCAN_TOLERANCE,
        },
        OracleResult {
            name: "scan_vs_chunked".into(),
            max_error: chunked,
            cases: seeds.len(),
            tolerance: SCAN_TOLERANCE,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_two_seeds() {
        for res in grad_suite(&[0, 1])
            .unwrap()
            .iter()
            .chain(&scan_suite(&[0, 1, 2]).unwrap())
        {
            assert!(res.passed(), "{res:?}");
        }
    }

    #[test]
    fn every_check_is_named_once() {
        let names = grad_check_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }
}
