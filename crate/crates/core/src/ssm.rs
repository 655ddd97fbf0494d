//! Selective state-space (Mamba-style) sequence blocks.
//!
//! A block maps `L × h` to `L × h` for any `L ≥ 1`: nothing in it is indexed
//! by position, and every path is causal.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::kernels::{self, ScanDims};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Shape hyperparameters of one Mamba block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expansion: usize,
    pub conv_k: usize,
    /// Width of the low-rank step-size projection.
    pub dt_rank: usize,
}

impl SsmConfig {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        SsmConfig {
            d_model,
            d_state,
            expansion: 2,
            conv_k: 4,
            dt_rank: d_model.div_ceil(16),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expansion * self.d_model
    }
}

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

/// Parameters of one Mamba block, as ids into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MambaBlockParams {
    pub cfg: SsmConfig,
    pub in_proj_w: ParamId,
    pub in_proj_b: ParamId,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub x_proj_w: ParamId,
    pub dt_proj_w: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj_w: ParamId,
    pub out_proj_b: ParamId,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl MambaBlockParams {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: SsmConfig, rng: &mut Rng) -> Self {
        let h = cfg.d_model;
        let di = cfg.d_inner();
        let n = cfg.d_state;
        let r = cfg.dt_rank;
        let k = cfg.conv_k;
        let name = |s: &str| format!("{prefix}.{s}");

        let in_proj_w = store.add(
            name("in_proj.weight"),
            Tensor::uniform(&[h, 2 * di], 1.0 / (h as f64).sqrt(), rng),
        );
        let in_proj_b = store.add(name("in_proj.bias"), Tensor::zeros(&[1, 2 * di]));
        let conv_kernel = store.add(
            name("conv.weight"),
            Tensor::uniform(&[k, di], 1.0 / (k as f64).sqrt(), rng),
        );
        let conv_bias = store.add(name("conv.bias"), Tensor::zeros(&[1, di]));
        let x_proj_w = store.add(
            name("x_proj.weight"),
            Tensor::uniform(&[di, r + 2 * n], 1.0 / (di as f64).sqrt(), rng),
        );
        let dt_proj_w = store.add(
            name("dt_proj.weight"),
            Tensor::uniform(&[r, di], 1.0 / (r as f64).sqrt(), rng),
        );
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        let dt_bias_vals: Vec<f64> = (0..di).map(|_| inverse_softplus(rng.gen_range(lo..hi).exp())).collect();
        let dt_bias = store.add(name("dt_proj.bias"), Tensor::from_parts(vec![1, di], dt_bias_vals));
        let a_log_vals: Vec<f64> = (0..di).flat_map(|_| (1..=n).map(|s| (s as f64).ln())).collect();
        let a_log = store.add(name("A_log"), Tensor::from_parts(vec![di, n], a_log_vals));
        let d_skip = store.add(name("D"), Tensor::ones(&[1, di]));
        let out_proj_w = store.add(
            name("out_proj.weight"),
            Tensor::uniform(&[di, h], 1.0 / (di as f64).sqrt(), rng),
        );
        let out_proj_b = store.add(name("out_proj.bias"), Tensor::zeros(&[1, h]));
        MambaBlockParams {
            cfg,
            in_proj_w,
            in_proj_b,
            conv_kernel,
            conv_bias,
            x_proj_w,
            dt_proj_w,
            dt_bias,
            a_log,
            d_skip,
            out_proj_w,
            out_proj_b,
        }
    }

    pub fn ids(&self) -> [ParamId; 11] {
        [
            self.in_proj_w,
            self.in_proj_b,
            self.conv_kernel,
            self.conv_bias,
            self.x_proj_w,
            self.dt_proj_w,
            self.dt_bias,
            self.a_log,
            self.d_skip,
            self.out_proj_w,
            self.out_proj_b,
        ]
    }

    /// Zeroes the output projection so the block contributes nothing.
    pub fn zero_output(&self, store: &mut ParamStore) {
        for id in [self.out_proj_w, self.out_proj_b] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).expect("same shape");
        }
    }
}

/// Two Mamba blocks applied as a residual stack.
#[derive(Clone, Debug)]
pub struct MambaModuleParams {
    pub block1: MambaBlockParams,
    pub block2: MambaBlockParams,
}

impl MambaModuleParams {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: SsmConfig, rng: &mut Rng) -> Self {
        MambaModuleParams {
            block1: MambaBlockParams::init(store, &format!("{prefix}.block1"), cfg, rng),
            block2: MambaBlockParams::init(store, &format!("{prefix}.block2"), cfg, rng),
        }
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        self.block1.zero_output(store);
        self.block2.zero_output(store);
    }
}

/// One selective scan on the tape; see [`Tape::selective_scan`] for shapes.
pub fn selective_scan(tape: &mut Tape, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
    tape.selective_scan(u, delta, a, b, c, d)
}

/// The same recurrence as [`selective_scan`], evaluated in chunks of `chunk` frames.
///
/// Inside a chunk the states are computed from zero; the state carried in from
/// the previous chunk enters through the cumulative decay of the chunk. With
/// `chunk = 1` this is the O(1)-state streaming recurrence.
pub fn selective_scan_chunked(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::invalid("chunk must be at least 1"));
    }
    let dims = crate::tensor::tape::scan_dims(u, delta, a, b, c, d)?;
    let ScanDims {
        len,
        channels: dc,
        states: ds,
    } = dims;
    let (ud, dtd, ad, bd, cd) = (u.data(), delta.data(), a.data(), b.data(), c.data());
    let mut y = vec![0.0; len * dc];
    let mut carry = vec![0.0; dc * ds];
    let mut local_states = vec![0.0; len * dc * ds];
    let mut start = 0;
    while start < len {
        let end = (start + chunk).min(len);
        let mut h = vec![0.0; dc * ds];
        kernels::scan_range(
            dims,
            ud,
            dtd,
            ad,
            bd,
            cd,
            d.data(),
            start,
            end,
            &mut h,
            &mut y,
            Some(&mut local_states),
        );
        if start > 0 {
            // Fold in the carried state: h_i += (Π_{m=start..=i} exp(Δ_m a)) · carry.
            let mut decay_prod = vec![1.0; dc * ds];
            for i in start..end {
                let crow = &cd[i * ds..(i + 1) * ds];
                for ch in 0..dc {
                    let dt = dtd[i * dc + ch];
                    let mut corr = 0.0;
                    for s in 0..ds {
                        let idx = ch * ds + s;
                        decay_prod[idx] *= (dt * ad[idx]).exp();
                        let extra = decay_prod[idx] * carry[idx];
                        local_states[(i * dc + ch) * ds + s] += extra;
                        corr += crow[s] * extra;
                    }
                    y[i * dc + ch] += corr;
                }
            }
        }
        let last = end - 1;
        carry.copy_from_slice(&local_states[last * dc * ds..(last + 1) * dc * ds]);
        start = end;
    }
    Tensor::new(&[len, dc], y)
}

/// Standard Mamba block wiring:
/// in_proj → (stream, gate) → causal depthwise conv → silu → (Δ, B, C) → scan → ⊙ silu(gate) → out_proj.
pub fn mamba_block(tape: &mut Tape, bound: &Bound, p: &MambaBlockParams, x: Var) -> Result<Var> {
    let cfg = p.cfg;
    let di = cfg.d_inner();
    let (r, n) = (cfg.dt_rank, cfg.d_state);
    let (_, width) = tape.value(x).dims2()?;
    if width != cfg.d_model {
        return Err(Error::shape(
            "mamba_block",
            format!("input width {} vs model {}", width, cfg.d_model),
        ));
    }

    let xz = tape.linear(x, bound[p.in_proj_w], Some(bound[p.in_proj_b]))?;
    let stream = tape.slice_lastdim(xz, 0, di)?;
    let gate = tape.slice_lastdim(xz, di, di)?;

    let conv = tape.depthwise_conv1d(stream, bound[p.conv_kernel])?;
    let conv = tape.add_row(conv, bound[p.conv_bias])?;
    let u = tape.silu(conv)?;

    let dbc = tape.linear(u, bound[p.x_proj_w], None)?;
    let dt_low = tape.slice_lastdim(dbc, 0, r)?;
    let b = tape.slice_lastdim(dbc, r, n)?;
    let c = tape.slice_lastdim(dbc, r + n, n)?;
    let dt = tape.linear(dt_low, bound[p.dt_proj_w], Some(bound[p.dt_bias]))?;
    let delta = tape.softplus(dt)?;
    let a = tape.neg_exp(bound[p.a_log])?;

    let y = tape.selective_scan(u, delta, a, b, c, bound[p.d_skip])?;
    let g = tape.silu(gate)?;
    let y = tape.mul(y, g)?;
    tape.linear(y, bound[p.out_proj_w], Some(bound[p.out_proj_b]))
}

/// `r = x + block1(x)`, then `r + block2(r)`.
pub fn mamba_module(tape: &mut Tape, bound: &Bound, p: &MambaModuleParams, x: Var) -> Result<Var> {
    let y1 = mamba_block(tape, bound, &p.block1, x)?;
    let r = tape.add(x, y1)?;
    let y2 = mamba_block(tape, bound, &p.block2, r)?;
    tape.add(r, y2)
}

/// Explicit unrolled form of the scan, kept as an independent reference.
///
/// Each state is expanded as `h_i = Σ_{k≤i} exp(a · Σ_{m=k+1..=i} Δ_m) Δ_k b_k u_k`,
/// which is quadratic in `L` and shares no code with the recurrent kernel.
pub fn unrolled_scan_reference(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Result<Tensor> {
    let (len, dc) = u.dims2()?;
    let (_, ds) = a.dims2()?;
    let mut y = vec![0.0; len * dc];
    for i in 0..len {
        for ch in 0..dc {
            let mut out = d.data()[ch] * u.get2(i, ch);
            for s in 0..ds {
                let mut h = 0.0;
                for k in 0..=i {
                    let lag: f64 = (k + 1..=i).map(|m| delta.get2(m, ch)).sum();
                    h += (a.get2(ch, s) * lag).exp() * delta.get2(k, ch) * b.get2(k, s) * u.get2(k, ch);
                }
                out += c.get2(i, s) * h;
            }
            y[i * dc + ch] = out;
        }
    }
    Tensor::new(&[len, dc], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::grad_check;

    pub(crate) struct ScanCase {
        pub u: Tensor,
        pub delta: Tensor,
        pub a: Tensor,
        pub b: Tensor,
        pub c: Tensor,
        pub d: Tensor,
    }

    pub(crate) fn random_case(len: usize, dc: usize, ds: usize, seed: u64) -> ScanCase {
        let mut r = rng::indexed_stream(seed, "scan-case", len as u64);
        let delta_raw = Tensor::uniform(&[len, dc], 1.0, &mut r);
        let delta = Tensor::new(
            &[len, dc],
            delta_raw.data().iter().map(|v| 0.05 + 0.5 * (v + 1.0)).collect(),
        )
        .unwrap();
        let a_log = Tensor::uniform(&[dc, ds], 1.0, &mut r);
        let a = Tensor::new(&[dc, ds], a_log.data().iter().map(|v| -v.exp()).collect()).unwrap();
        ScanCase {
            u: Tensor::randn(&[len, dc], 1.0, &mut r),
            delta,
            a,
            b: Tensor::randn(&[len, ds], 1.0, &mut r),
            c: Tensor::randn(&[len, ds], 1.0, &mut r),
            d: Tensor::randn(&[1, dc], 1.0, &mut r),
        }
    }

    fn run_scan(case: &ScanCase) -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d]
            .iter()
            .map(|t| tape.constant((*t).clone()))
            .collect();
        let y = tape
            .selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])
            .unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn single_step_has_no_history() {
        let case = random_case(1, 3, 2, 11);
        let y = run_scan(&case);
        for ch in 0..3 {
            let dt = case.delta.get2(0, ch);
            let u0 = case.u.get2(0, ch);
            let expected: f64 = (0..2)
                .map(|s| case.c.get2(0, s) * dt * case.b.get2(0, s) * u0)
                .sum::<f64>()
                + case.d.data()[ch] * u0;
            assert!((y.get2(0, ch) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn strongly_negative_a_is_memoryless() {
        let mut case = random_case(6, 2, 3, 5);
        case.a = Tensor::filled(&[2, 3], -1e6);
        let y = run_scan(&case);
        for i in 0..6 {
            for ch in 0..2 {
                let dt = case.delta.get2(i, ch);
                let ui = case.u.get2(i, ch);
                let expected: f64 = (0..3)
                    .map(|s| case.c.get2(i, s) * dt * case.b.get2(i, s) * ui)
                    .sum::<f64>()
                    + case.d.data()[ch] * ui;
                assert!((y.get2(i, ch) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_unrolled_reference() {
        let case = random_case(12, 4, 3, 1);
        let y = run_scan(&case);
        let reference = unrolled_scan_reference(&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d).unwrap();
        assert!(y.max_abs_diff(&reference) < 1e-10);
    }

    #[test]
    fn chunked_equals_full() {
        let case = random_case(40, 4, 3, 2);
        let full = run_scan(&case);
        let same = selective_scan_chunked(&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d, 40).unwrap();
        assert_eq!(same, full);
        for chunk in [1, 7, 13, 39, 100] {
            let y = selective_scan_chunked(&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d, chunk).unwrap();
            assert!(y.max_abs_diff(&full) < 1e-10, "chunk {chunk}");
        }
        assert!(selective_scan_chunked(&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d, 0).is_err());
    }

    #[test]
    fn rejects_non_positive_delta() {
        let mut case = random_case(4, 2, 2, 3);
        case.delta = Tensor::zeros(&[4, 2]);
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d]
            .iter()
            .map(|t| tape.constant((*t).clone()))
            .collect();
        let err = tape.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let case = random_case(8, 3, 2, 4);
        let leaves = [case.u, case.delta, case.a, case.b, case.c, case.d];
        let report = grad_check(
            |tape, v| {
                let y = tape.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?;
                tape.sum(y)
            },
            &leaves,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn block_setup(seed: u64) -> (ParamStore, MambaModuleParams) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "init");
        let p = MambaModuleParams::init(&mut store, "m", SsmConfig::new(8, 4), &mut r);
        (store, p)
    }

    #[test]
    fn inits_match_documented_ranges() {
        let (store, p) = block_setup(0);
        for &v in store.get(p.block1.dt_bias).data() {
            let dt = kernels::softplus(v);
            assert!((DT_MIN * 0.999..=DT_MAX * 1.001).contains(&dt), "dt {dt}");
        }
        let a_log = store.get(p.block1.a_log);
        assert!(a_log.data().iter().all(|v| -v.exp() < 0.0));
        assert_eq!(a_log.get2(0, 0), 0.0);
        assert!((a_log.get2(3, 3) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(p.block1.cfg.d_inner(), 16);
        assert_eq!(p.block1.cfg.conv_k, 4);
    }

    #[test]
    fn block_is_causal_at_prefix() {
        let (store, p) = block_setup(1);
        let mut r = rng::stream(9, "x");
        let x2 = Tensor::randn(&[2, 8], 1.0, &mut r);
        let x1 = Tensor::new(&[1, 8], x2.row_slice(0).to_vec()).unwrap();
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let y = mamba_block(&mut tape, &bound, &p.block1, xv).unwrap();
            tape.value(y).clone()
        };
        let y1 = run(&x1);
        let y2 = run(&x2);
        assert_eq!(y1.row_slice(0), y2.row_slice(0));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let (store, p) = block_setup(2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[5, 8]));
        let y = mamba_block(&mut tape, &bound, &p.block1, x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zeroed_module_is_identity() {
        let (mut store, p) = block_setup(3);
        p.zero_output(&mut store);
        let mut r = rng::stream(4, "x");
        let x = Tensor::randn(&[7, 8], 1.0, &mut r);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = mamba_module(&mut tape, &bound, &p, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn module_is_composed_residual_blocks() {
        let (store, p) = block_setup(5);
        let mut r = rng::stream(6, "x");
        let x = Tensor::randn(&[6, 8], 1.0, &mut r);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let y = mamba_module(&mut tape, &bound, &p, xv).unwrap();
        let b1 = mamba_block(&mut tape, &bound, &p.block1, xv).unwrap();
        let r1 = tape.add(xv, b1).unwrap();
        let b2 = mamba_block(&mut tape, &bound, &p.block2, r1).unwrap();
        let manual = tape.add(r1, b2).unwrap();
        assert_eq!(tape.value(y), tape.value(manual));
    }

    #[test]
    fn module_runs_far_beyond_training_length() {
        let (store, p) = block_setup(7);
        let mut r = rng::stream(8, "x");
        let x = Tensor::randn(&[160, 8], 1.0, &mut r);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let y = mamba_module(&mut tape, &bound, &p, xv).unwrap();
        assert_eq!(tape.value(y).shape(), &[160, 8]);
        assert!(tape.value(y).is_finite());
    }
}
