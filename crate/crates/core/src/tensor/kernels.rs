//! Plain-slice kernels shared by the tape ops and the non-differentiable paths.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Depthwise causal convolution: `y[i,c] = Σ_j kernel[j,c] · x[i-j,c]`, frames before 0 are zero.
pub(crate) fn conv1d_forward(x: &[f64], kernel: &[f64], len: usize, ch: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; len * ch];
    for i in 0..len {
        let yrow = &mut y[i * ch..(i + 1) * ch];
        for j in 0..k.min(i + 1) {
            let xrow = &x[(i - j) * ch..(i - j + 1) * ch];
            let krow = &kernel[j * ch..(j + 1) * ch];
            for c in 0..ch {
                yrow[c] += krow[c] * xrow[c];
            }
        }
    }
    y
}

/// Dimensions of one selective-scan problem.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub states: usize,
}

/// Runs the discretized recurrence over frames `start..end`, starting from `h`
/// (`channels × states`) and leaving the final state in it. Writes outputs into `y`
/// and, when given, every intermediate state into `states_out` (`len × channels × states`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_range(
    dims: ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    start: usize,
    end: usize,
    h: &mut [f64],
    y: &mut [f64],
    mut states_out: Option<&mut [f64]>,
) {
    let ScanDims {
        channels: dc,
        states: ds,
        ..
    } = dims;
    for i in start..end {
        let brow = &b[i * ds..(i + 1) * ds];
        let crow = &c[i * ds..(i + 1) * ds];
        for ch in 0..dc {
            let dt = delta[i * dc + ch];
            let ui = u[i * dc + ch];
            let arow = &a[ch * ds..(ch + 1) * ds];
            let hrow = &mut h[ch * ds..(ch + 1) * ds];
            let mut acc = 0.0;
            for s in 0..ds {
                let decay = (dt * arow[s]).exp();
                hrow[s] = decay * hrow[s] + dt * brow[s] * ui;
                acc += crow[s] * hrow[s];
            }
            y[i * dc + ch] = acc + d[ch] * ui;
            if let Some(out) = states_out.as_deref_mut() {
                let off = (i * dc + ch) * ds;
                out[off..off + ds].copy_from_slice(hrow);
            }
        }
    }
}

/// Gradients of the selective scan.
pub(crate) struct ScanGrads {
    pub du: Vec<f64>,
    pub ddelta: Vec<f64>,
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    pub dd: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    dims: ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    states: &[f64],
    dy: &[f64],
) -> ScanGrads {
    let ScanDims {
        len,
        channels: dc,
        states: ds,
    } = dims;
    let mut g = ScanGrads {
        du: vec![0.0; len * dc],
        ddelta: vec![0.0; len * dc],
        da: vec![0.0; dc * ds],
        db: vec![0.0; len * ds],
        dc: vec![0.0; len * ds],
        dd: vec![0.0; dc],
    };
    // Adjoint of h[i] carried backwards, already multiplied by the decay of frame i+1.
    let mut carry = vec![0.0; dc * ds];
    for i in (0..len).rev() {
        let brow = &b[i * ds..(i + 1) * ds];
        let crow = &c[i * ds..(i + 1) * ds];
        for ch in 0..dc {
            let gy = dy[i * dc + ch];
            let dt = delta[i * dc + ch];
            let ui = u[i * dc + ch];
            let arow = &a[ch * ds..(ch + 1) * ds];
            let hcur = &states[(i * dc + ch) * ds..(i * dc + ch + 1) * ds];
            let carry_row = &mut carry[ch * ds..(ch + 1) * ds];
            g.dd[ch] += gy * ui;
            let mut du = gy * d[ch];
            let mut ddt = 0.0;
            for s in 0..ds {
                g.dc[i * ds + s] += gy * hcur[s];
                let gh = gy * crow[s] + carry_row[s];
                let decay = (dt * arow[s]).exp();
                let hprev = if i > 0 {
                    states[((i - 1) * dc + ch) * ds + s]
                } else {
                    0.0
                };
                let gdecay = gh * hprev * decay;
                ddt += gdecay * arow[s] + gh * brow[s] * ui;
                g.da[ch * ds + s] += gdecay * dt;
                g.db[i * ds + s] += gh * dt * ui;
                du += gh * dt * brow[s];
                carry_row[s] = gh * decay;
            }
            g.du[i * dc + ch] += du;
            g.ddelta[i * dc + ch] += ddt;
        }
    }
    g
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}
