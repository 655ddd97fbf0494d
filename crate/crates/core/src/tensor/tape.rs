use super::kernels::{self, ScanDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Silu(Var),
    Softplus(Var),
    Sigmoid(Var),
    NegExp(Var),
    Square(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Conv1d { x: Var, kernel: Var },
    Scan { inputs: [Var; 6], states: Vec<f64> },
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    ConcatRows(Var, Var),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::NegExp(_) => "neg_exp",
            Op::Square(_) => "square",
            Op::LayerNorm { .. } => "layernorm_nogain",
            Op::Conv1d { .. } => "depthwise_conv1d",
            Op::Scan { .. } => "selective_scan",
            Op::ConcatCols(..) => "concat_lastdim",
            Op::SliceCols { .. } => "slice_lastdim",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of a forward computation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: &[f64]) {
    match slot {
        Some(t) => {
            for (g, d) in t.data_mut().iter_mut().zip(delta) {
                *g += d;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta.to_vec())),
    }
}

fn accumulate_owned(slot: &mut Option<Tensor>, shape: &[usize], delta: Vec<f64>) {
    match slot {
        Some(t) => {
            for (g, d) in t.data_mut().iter_mut().zip(&delta) {
                *g += d;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta)),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, op, &[x])
    }

    fn zip_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op.name(), ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{}×{} · {}×{}", m, k, k2, n)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + b`, with `w` stored as `in × out` and `b` as `1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.value(x).dims2()?;
        let (k2, n) = self.value(w).dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "linear",
                format!("input {}×{} · weight {}×{}", m, k, k2, n),
            ));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [1, n] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for width {}", bias.shape(), n),
                ));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias.data());
            }
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.map_unary(x, |v| v * k, Op::Scale(x, k))
    }

    /// `x + k` elementwise.
    pub fn offset(&mut self, x: Var, k: f64) -> Result<Var> {
        self.map_unary(x, |v| v + k, Op::Offset(x))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let r = self.value(row);
        if r.shape() != [1, cols] {
            return Err(Error::shape(
                if mul { "mul_row" } else { "add_row" },
                format!("row {:?} against {}×{}", r.shape(), rows, cols),
            ));
        }
        let rv = r.data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (v, &w) in chunk.iter_mut().zip(rv) {
                if mul {
                    *v *= w;
                } else {
                    *v += w;
                }
            }
        }
        let op = if mul { Op::MulRow(x, row) } else { Op::AddRow(x, row) };
        self.push(Tensor::from_parts(vec![rows, cols], data), op, &[x, row])
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, false)
    }

    /// Multiplies every row of `x` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, true)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, kernels::silu, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, kernels::softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// `-exp(x)`, used to keep state decay rates strictly negative.
    pub fn neg_exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| -v.exp(), Op::NegExp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v * v, Op::Square(x))
    }

    /// Per-row normalization to zero mean and unit variance, without learned affine.
    pub fn layernorm_nogain(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if cols < 2 {
            return Err(Error::shape("layernorm_nogain", "needs at least 2 columns"));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for (i, out) in data.chunks_mut(cols).enumerate() {
            let row = &src[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            inv_std.push(r);
        }
        self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::LayerNorm { x, inv_std },
            &[x],
        )
    }

    /// Channel-wise causal convolution of `x` (`L × d`) with `kernel` (`k × d`);
    /// tap `j` multiplies frame `i - j`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (len, ch) = self.value(x).dims2()?;
        let (k, ch2) = self.value(kernel).dims2()?;
        if ch != ch2 {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("{} channels vs kernel {}", ch, ch2),
            ));
        }
        let y = kernels::conv1d_forward(self.value(x).data(), self.value(kernel).data(), len, ch, k);
        self.push(
            Tensor::from_parts(vec![len, ch], y),
            Op::Conv1d { x, kernel },
            &[x, kernel],
        )
    }

    /// Selective state-space scan.
    ///
    /// Shapes: `u`, `delta`: `L × D`; `a`: `D × N`; `b`, `c`: `L × N`; `d`: `1 × D`.
    /// For every channel and state: `h_i = exp(Δ_i a) h_{i-1} + Δ_i b_i u_i`, `h_{-1} = 0`,
    /// and `y_i = Σ_s c_i[s] h_i[s] + d u_i`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let dims = scan_dims(
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d),
        )?;
        let inputs = [u, delta, a, b, c, d];
        let track = inputs.iter().any(|v| self.requires_grad(*v));
        let mut h = vec![0.0; dims.channels * dims.states];
        let mut y = vec![0.0; dims.len * dims.channels];
        let mut states = if track {
            vec![0.0; dims.len * dims.channels * dims.states]
        } else {
            Vec::new()
        };
        kernels::scan_range(
            dims,
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            0,
            dims.len,
            &mut h,
            &mut y,
            track.then_some(states.as_mut_slice()),
        );
        self.push(
            Tensor::from_parts(vec![dims.len, dims.channels], y),
            Op::Scan { inputs, states },
            &inputs,
        )
    }

    /// Concatenation along the last dimension: `L×m ⊕ L×n → L×(m+n)`.
    pub fn concat_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::shape("concat_lastdim", format!("{} rows vs {}", ra, rb)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        self.push(
            Tensor::from_parts(vec![ra, ca + cb], data),
            Op::ConcatCols(a, b),
            &[a, b],
        )
    }

    /// Columns `start..start+width` of a rank-2 value.
    pub fn slice_lastdim(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if width == 0 || start + width > cols {
            return Err(Error::shape(
                "slice_lastdim",
                format!("columns {}..{} of {}", start, start + width, cols),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + width]);
        }
        self.push(
            Tensor::from_parts(vec![rows, width], data),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    /// Stacks `b` below `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ca != cb {
            return Err(Error::shape("concat_rows", format!("{} cols vs {}", ca, cb)));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push(
            Tensor::from_parts(vec![ra + rb, ca], data),
            Op::ConcatRows(a, b),
            &[a, b],
        )
    }

    /// Rows `start..start+count` of a rank-2 value.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if count == 0 || start + count > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} of {}", start, start + count, rows),
            ));
        }
        let data = self.value(x).data()[start * cols..(start + count) * cols].to_vec();
        self.push(
            Tensor::from_parts(vec![count, cols], data),
            Op::SliceRows { x, start },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::from_parts(vec![1], vec![m]), Op::Mean(x), &[x])
    }

    /// Mean squared difference of two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Differences of consecutive rows, `x[1..] - x[..L-1]`.
    pub fn frame_diff(&mut self, x: Var) -> Result<Var> {
        let (rows, _) = self.value(x).dims2()?;
        if rows < 2 {
            return Err(Error::shape("frame_diff", "needs at least 2 rows"));
        }
        let next = self.slice_rows(x, 1, rows - 1)?;
        let prev = self.slice_rows(x, 0, rows - 1)?;
        self.sub(next, prev)
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Every leaf created with [`Tape::leaf`] gets a gradient, zero when the
    /// loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must have one element, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let loss_shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::from_parts(loss_shape, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::NonFinite("backward"));
            }
            self.propagate(node, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = out.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(gd, self.value(*b).data(), &mut da, m, k, n);
                    accumulate_owned(&mut grads[a.0], &[m, k], da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(self.value(*a).data(), gd, &mut db, m, k, n);
                    accumulate_owned(&mut grads[b.0], &[k, n], db);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.value(*x).dims2().expect("rank 2");
                let n = out.shape()[1];
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * k];
                    kernels::matmul_nt_acc(gd, self.value(*w).data(), &mut dx, m, k, n);
                    accumulate_owned(&mut grads[x.0], &[m, k], dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * n];
                    kernels::matmul_tn_acc(self.value(*x).data(), gd, &mut dw, m, k, n);
                    accumulate_owned(&mut grads[w.0], &[k, n], dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; n];
                        for row in gd.chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate_owned(&mut grads[b.0], &[1, n], db);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], out.shape(), gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], out.shape(), gd);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                    accumulate_owned(&mut grads[b.0], out.shape(), neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    accumulate_owned(&mut grads[a.0], out.shape(), d);
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate_owned(&mut grads[b.0], out.shape(), d);
                }
            }
            Op::Scale(x, k) => {
                let d = gd.iter().map(|g| g * k).collect();
                accumulate_owned(&mut grads[x.0], out.shape(), d);
            }
            Op::Offset(x) => {
                accumulate(&mut grads[x.0], out.shape(), gd);
            }
            Op::AddRow(x, row) => {
                let cols = out.shape()[1];
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], out.shape(), gd);
                }
                if self.wants(*row) {
                    let mut dr = vec![0.0; cols];
                    for chunk in gd.chunks(cols) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate_owned(&mut grads[row.0], &[1, cols], dr);
                }
            }
            Op::MulRow(x, row) => {
                let cols = out.shape()[1];
                let rv = self.value(*row).data();
                let xv = self.value(*x).data();
                if self.wants(*x) {
                    let d = gd
                        .chunks(cols)
                        .flat_map(|chunk| chunk.iter().zip(rv).map(|(g, r)| g * r))
                        .collect();
                    accumulate_owned(&mut grads[x.0], out.shape(), d);
                }
                if self.wants(*row) {
                    let mut dr = vec![0.0; cols];
                    for (gchunk, xchunk) in gd.chunks(cols).zip(xv.chunks(cols)) {
                        for ((d, g), x) in dr.iter_mut().zip(gchunk).zip(xchunk) {
                            *d += g * x;
                        }
                    }
                    accumulate_owned(&mut grads[row.0], &[1, cols], dr);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        let s = kernels::sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                accumulate_owned(&mut grads[x.0], out.shape(), d);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, &v)| g * kernels::sigmoid(v)).collect();
                accumulate_owned(&mut grads[x.0], out.shape(), d);
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate_owned(&mut grads[x.0], out.shape(), d);
            }
            Op::NegExp(x) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                accumulate_owned(&mut grads[x.0], out.shape(), d);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, v)| 2.0 * g * v).collect();
                accumulate_owned(&mut grads[x.0], out.shape(), d);
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = out.shape()[1];
                let n = cols as f64;
                let mut d = vec![0.0; out.numel()];
                for (i, r) in inv_std.iter().enumerate() {
                    let gy = &gd[i * cols..(i + 1) * cols];
                    let y = &out.data()[i * cols..(i + 1) * cols];
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..cols {
                        d[i * cols + j] = r * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
                accumulate_owned(&mut grads[x.0], out.shape(), d);
            }
            Op::Conv1d { x, kernel } => {
                let (len, ch) = self.value(*x).dims2().expect("rank 2");
                let (k, _) = self.value(*kernel).dims2().expect("rank 2");
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; len * ch];
                    for i in 0..len {
                        for j in 0..k.min(i + 1) {
                            for c in 0..ch {
                                dx[(i - j) * ch + c] += kv[j * ch + c] * gd[i * ch + c];
                            }
                        }
                    }
                    accumulate_owned(&mut grads[x.0], &[len, ch], dx);
                }
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; k * ch];
                    for i in 0..len {
                        for j in 0..k.min(i + 1) {
                            for c in 0..ch {
                                dk[j * ch + c] += xv[(i - j) * ch + c] * gd[i * ch + c];
                            }
                        }
                    }
                    accumulate_owned(&mut grads[kernel.0], &[k, ch], dk);
                }
            }
            Op::Scan { inputs, states } => {
                let [u, delta, a, b, c, d] = *inputs;
                let (len, channels) = self.value(u).dims2().expect("rank 2");
                let (_, nstate) = self.value(a).dims2().expect("rank 2");
                let dims = ScanDims {
                    len,
                    channels,
                    states: nstate,
                };
                let sg = kernels::scan_backward(
                    dims,
                    self.value(u).data(),
                    self.value(delta).data(),
                    self.value(a).data(),
                    self.value(b).data(),
                    self.value(c).data(),
                    self.value(d).data(),
                    states,
                    gd,
                );
                let parts = [
                    (u, sg.du),
                    (delta, sg.ddelta),
                    (a, sg.da),
                    (b, sg.db),
                    (c, sg.dc),
                    (d, sg.dd),
                ];
                for (v, grad) in parts {
                    if self.wants(v) {
                        let shape = self.value(v).shape().to_vec();
                        accumulate_owned(&mut grads[v.0], &shape, grad);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = self.value(*a).dims2().expect("rank 2");
                let cb = self.value(*b).shape()[1];
                let cols = ca + cb;
                if self.wants(*a) {
                    let d = (0..rows)
                        .flat_map(|i| gd[i * cols..i * cols + ca].iter().copied())
                        .collect();
                    accumulate_owned(&mut grads[a.0], &[rows, ca], d);
                }
                if self.wants(*b) {
                    let d = (0..rows)
                        .flat_map(|i| gd[i * cols + ca..(i + 1) * cols].iter().copied())
                        .collect();
                    accumulate_owned(&mut grads[b.0], &[rows, cb], d);
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.value(*x).dims2().expect("rank 2");
                let width = out.shape()[1];
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    d[i * cols + start..i * cols + start + width].copy_from_slice(&gd[i * width..(i + 1) * width]);
                }
                accumulate_owned(&mut grads[x.0], &[rows, cols], d);
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                if self.wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads[a.0], &shape, &gd[..na]);
                }
                if self.wants(*b) {
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads[b.0], &shape, &gd[na..]);
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.value(*x).dims2().expect("rank 2");
                let mut d = vec![0.0; rows * cols];
                d[start * cols..start * cols + gd.len()].copy_from_slice(gd);
                accumulate_owned(&mut grads[x.0], &[rows, cols], d);
            }
            Op::Sum(x) => {
                let t = self.value(*x);
                let d = vec![gd[0]; t.numel()];
                accumulate_owned(&mut grads[x.0], t.shape(), d);
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let d = vec![gd[0] / t.numel() as f64; t.numel()];
                accumulate_owned(&mut grads[x.0], t.shape(), d);
            }
        }
    }
}

pub(crate) fn scan_dims(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Result<ScanDims> {
    let (len, channels) = u.dims2()?;
    let (da, nstate) = a.dims2()?;
    let ok = delta.shape() == [len, channels]
        && da == channels
        && b.shape() == [len, nstate]
        && c.shape() == [len, nstate]
        && d.shape() == [1, channels];
    if !ok {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "u {:?}, delta {:?}, a {:?}, b {:?}, c {:?}, d {:?}",
                u.shape(),
                delta.shape(),
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            ),
        ));
    }
    if delta.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("selective_scan requires delta > 0 everywhere"));
    }
    Ok(ScanDims {
        len,
        channels,
        states: nstate,
    })
}
