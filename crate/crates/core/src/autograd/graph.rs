//! Define-by-run tape. Every op appends one node holding its forward value;
//! `backward` walks the tape in reverse once and leaves gradients on the
//! leaves that asked for them.

use std::cell::Cell;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose forward value is computed by the caller.
///
/// `backward` returns one entry per input, `None` for inputs that receive no
/// gradient.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Option<Vec<f64>>>>;

    /// Bytes held by the op for its backward pass, counted against the
    /// graph's memory cap.
    fn saved_bytes(&self) -> usize {
        0
    }
}

/// Built-in op kinds; used for fault injection in mutation tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Shift,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    MatMul,
    Linear,
    Transpose,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Conv1d,
    Attention,
    Sum,
    Reshape,
    SliceRows,
    SliceCols,
    ConcatRows,
    ConcatCols,
    GatherRows,
    Pick,
    OuterAdd,
    Custom,
}

#[doc(hidden)]
pub mod fault {
    use super::OpKind;
    use std::cell::Cell;

    thread_local! {
        pub(super) static ACTIVE: Cell<Option<OpKind>> = const { Cell::new(None) };
    }

    /// Corrupts the backward rule of `kind` on the current thread (gradient
    /// scaled by 1.5). Pass `None` to restore.
    pub fn inject(kind: Option<OpKind>) {
        ACTIVE.with(|a| a.set(kind));
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Vec<bool>>,
    },
    Sum(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    OuterAdd(Var, Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(..) => OpKind::Shift,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Abs(..) => OpKind::Abs,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Attention { .. } => OpKind::Attention,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Pick { .. } => OpKind::Pick,
            Op::OuterAdd(..) => OpKind::OuterAdd,
            Op::Custom { .. } => OpKind::Custom,
        }
    }

    fn saved_bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        match self {
            Op::LayerNorm { mean, inv_std, .. } => (mean.len() + inv_std.len()) * f,
            Op::Attention { mask, .. } => mask.as_ref().map_or(0, Vec::len),
            Op::Custom { op, .. } => op.saved_bytes(),
            _ => 0,
        }
    }
}

struct AttnGeom {
    u: usize,
    t: usize,
    /// Per-head key and value widths.
    dk: usize,
    dv: usize,
    d: usize,
    scale: f64,
}

impl AttnGeom {
    fn new(sq: &[usize], sk: &[usize], sv: &[usize], heads: usize) -> Self {
        let dk = sq[1] / heads;
        AttnGeom {
            u: sq[0],
            t: sk[0],
            dk,
            dv: sv[1] / heads,
            d: sq[1],
            scale: 1.0 / (dk.max(1) as f64).sqrt(),
        }
    }

    /// Row-softmaxed scaled scores of head `h`, `[u, t]`.
    fn probs(&self, q: &[f64], k: &[f64], mask: Option<&[bool]>, h: usize) -> Vec<f64> {
        let qh = kernels::cols(q, self.u, self.d, h * self.dk, self.dk);
        let kh = kernels::cols(k, self.t, self.d, h * self.dk, self.dk);
        let kt = kernels::transpose(&kh, self.t, self.dk);
        let mut scores = vec![0.0; self.u * self.t];
        kernels::mm(&qh, &kt, &mut scores, self.u, self.dk, self.t);
        for s in scores.iter_mut() {
            *s *= self.scale;
        }
        if let Some(m) = mask {
            for (s, &keep) in scores.iter_mut().zip(m) {
                if !keep {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
        kernels::softmax_axis(&scores, &[self.u, self.t], 1, false)
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Reverse-mode differentiation tape with live-memory accounting.
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    live_bytes: usize,
    peak_bytes: usize,
    cap: Option<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const F64: usize = std::mem::size_of::<f64>();

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            live_bytes: 0,
            peak_bytes: 0,
            cap: None,
        }
    }

    /// A graph that fails with [`Error::OutOfMemory`] as soon as live tensor
    /// storage exceeds `cap` bytes.
    pub fn with_memory_cap(cap: usize) -> Self {
        Graph {
            cap: Some(cap),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    fn alloc(&mut self, bytes: usize) -> Result<()> {
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        match self.cap {
            Some(cap) if self.live_bytes > cap => Err(Error::OutOfMemory {
                cap,
                requested: self.live_bytes,
            }),
            _ => Ok(()),
        }
    }

    fn free(&mut self, bytes: usize) {
        self.live_bytes = self.live_bytes.saturating_sub(bytes);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let requires_grad = self.op_requires_grad(&op);
        self.alloc(value.nbytes() + op.saved_bytes())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => rg(a) || rg(b),
            Op::MatMul(a, b) | Op::OuterAdd(a, b) => rg(a) || rg(b),
            Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Reshape(x) => rg(x),
            Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Pick { x, .. } => rg(x),
            Op::Linear { x, w, b } => rg(x) || rg(w) || b.as_ref().is_some_and(rg),
            Op::LayerNorm { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
            Op::Conv1d { x, kernel, .. } => rg(x) || rg(kernel),
            Op::Attention { q, k, v, .. } => rg(q) || rg(k) || rg(v),
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(rg),
            Op::GatherRows { table, .. } => rg(table),
            Op::Custom { inputs, .. } => inputs.iter().any(rg),
        }
    }

    // ---- leaves ---------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.alloc(value.nbytes())?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last backward pass; all-zero when
    /// `v` did not participate.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let (long, short) = if sa.len() >= sb.len() { (sa, sb) } else { (sb, sa) };
        if long[long.len() - short.len()..] == *short {
            Ok(long.to_vec())
        } else {
            Err(Error::dim(op, sa, sb))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let (na, nb) = (da.len(), db.len());
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| f(da[i % na], db[i % nb])).collect();
        self.push(Tensor::new(shape, data)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::Shift(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::mm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// `x·w + b` over the last axis of `x` (any rank ≥ 1); `w` is `[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let (k, n) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::dim("linear.bias", self.shape(b), &[n]));
            }
        }
        let m = self
            .value(x)
            .numel()
            .checked_div(k)
            .unwrap_or_else(|| sx[..sx.len() - 1].iter().product());
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n.max(1)) {
                row.copy_from_slice(&bias[..row.len()]);
            }
        }
        kernels::mm(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value(x).data(), r, c);
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x))
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data) = {
            let t = self.value(x);
            if axis >= t.rank() {
                return Err(Error::dim("softmax", t.shape(), &[axis]));
            }
            (
                t.shape().to_vec(),
                kernels::softmax_axis(t.data(), t.shape(), axis, false),
            )
        };
        self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data) = {
            let t = self.value(x);
            if axis >= t.rank() {
                return Err(Error::dim("log_softmax", t.shape(), &[axis]));
            }
            (
                t.shape().to_vec(),
                kernels::softmax_axis(t.data(), t.shape(), axis, true),
            )
        };
        self.push(Tensor::new(shape, data)?, Op::LogSoftmax { x, axis })
    }

    /// Normalises over the last axis, then applies `gamma`/`beta` of that
    /// width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::dim("layer_norm", &sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", &sx, self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xs.len().checked_div(d).unwrap_or(0);
        let mut out = vec![0.0; xs.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * is * g[j] + bt[j];
            }
            mean.push(mu);
            inv_std.push(is);
        }
        self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
        )
    }

    // ---- sequence ops ---------------------------------------------------

    /// Same-padded 1-D convolution of `x: [T, d_in]` with
    /// `kernel: [k, d_in, d_out]`. Output length is `floor((T - 1) / stride) + 1`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 2 || sk.len() != 3 || sk[1] != sx[1] {
            return Err(Error::dim("conv1d", &sx, &sk));
        }
        if sk[0].is_multiple_of(2) {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {}", sk[0])));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        let geom = kernels::ConvGeom {
            t_in: sx[0],
            d_in: sx[1],
            width: sk[0],
            d_out: sk[2],
            stride,
        };
        let out = kernels::conv1d_forward(self.value(x).data(), self.value(kernel).data(), &geom);
        self.push(
            Tensor::new(vec![geom.t_out(), geom.d_out], out)?,
            Op::Conv1d { x, kernel, stride },
        )
    }

    /// `softmax(q·kᵀ/√d + mask)·v`. `mask`, when given, is `[U, T]` with
    /// non-zero entries marking attendable keys. A query row with no
    /// attendable key yields zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
        self.multi_head_attention(q, k, v, 1, mask)
    }

    /// Attention run independently on `heads` equal column blocks of `q`,
    /// `k` and `v`, outputs concatenated by column. The probabilities are
    /// recomputed during backward rather than stored.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Tensor>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(Error::dim("attention", &sq, &sk));
        }
        if heads == 0 || sq[1] % heads != 0 || sv[1] % heads != 0 {
            return Err(Error::dim("attention.heads", &sq, &[heads]));
        }
        let (u, t) = (sq[0], sk[0]);
        if let Some(m) = mask {
            if m.shape() != [u, t] {
                return Err(Error::dim("attention.mask", m.shape(), &[u, t]));
            }
        }
        let mask: Option<Vec<bool>> = mask.map(|m| m.data().iter().map(|&x| x != 0.0).collect());
        let geom = AttnGeom::new(&sq, &sk, &sv, heads);
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; u * sv[1]];
        for h in 0..heads {
            let probs = geom.probs(tq, tk, mask.as_deref(), h);
            let vh = kernels::cols(tv, t, sv[1], h * geom.dv, geom.dv);
            let mut oh = vec![0.0; u * geom.dv];
            kernels::mm(&probs, &vh, &mut oh, u, t, geom.dv);
            kernels::put_cols(&mut out, &oh, u, sv[1], h * geom.dv, geom.dv);
        }
        self.push(
            Tensor::new(vec![u, sv[1]], out)?,
            Op::Attention { q, k, v, heads, mask },
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start > end || end > s[0] {
            return Err(Error::dim("slice_rows", &s, &[start, end]));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..end * row].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        self.push(Tensor::new(shape, data)?, Op::SliceRows { x, start })
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::dim("slice_cols", &s, &[start, end]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * (end - start));
        for r in 0..s[0] {
            data.extend_from_slice(&src[r * s[1] + start..r * s[1] + end]);
        }
        self.push(Tensor::new(vec![s[0], end - start], data)?, Op::SliceCols { x, start })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat_rows", &[], &[]))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat_rows", s, &tail));
            }
            rows += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Tensor::new(shape, data)?, Op::ConcatRows(xs.to_vec()))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat_cols", &[], &[]))?;
        let rows = self.shape(*first).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", s, &[rows]));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(xs.to_vec()))
    }

    /// Embedding lookup: rows `ids` of a `[N, d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", &s, &[2]));
        }
        let d = s[1];
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= s[0] {
                return Err(Error::Vocabulary { id, vocab: s[0] });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::dim("pick", &s, &[idx.len()]));
        }
        let mut data = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= s[1] {
                return Err(Error::Vocabulary { id: j, vocab: s[1] });
            }
            data.push(self.value(x).data()[i * s[1] + j]);
        }
        self.push(Tensor::new(vec![idx.len()], data)?, Op::Pick { x, idx: idx.to_vec() })
    }

    /// Broadcast sum `out[t, u, :] = a[t, :] + b[u, :]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("outer_add", &sa, &sb));
        }
        let (t, u, d) = (sa[0], sb[0], sa[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(t * u * d);
        for ti in 0..t {
            for ui in 0..u {
                for j in 0..d {
                    data.push(da[ti * d + j] + db[ui * d + j]);
                }
            }
        }
        self.push(Tensor::new(vec![t, u, d], data)?, Op::OuterAdd(a, b))
    }

    /// Records a caller-computed value whose gradient is supplied by `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` on every leaf created with
    /// `requires_grad`. A graph supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        self.alloc(F64)?;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let gbytes = g.len() * F64;
            if !self.nodes[i].requires_grad {
                self.free(gbytes);
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                let t = Tensor::new(shape, g)?;
                match &mut self.nodes[i].grad {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                            *e += v;
                        }
                        self.free(gbytes);
                    }
                    slot => *slot = Some(t),
                }
                continue;
            }
            let mut contribs = self.local_grads(i, &g)?;
            self.free(gbytes);
            let factor = fault::ACTIVE.with(Cell::get).filter(|k| *k == self.nodes[i].op.kind());
            for (input, contrib) in contribs.drain(..) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let mut contrib = contrib;
                if factor.is_some() {
                    contrib.iter_mut().for_each(|v| *v *= 1.5);
                }
                match &mut grads[input.0] {
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(&contrib) {
                            *e += v;
                        }
                    }
                    slot => {
                        let bytes = contrib.len() * F64;
                        *slot = Some(contrib);
                        self.alloc(bytes)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if want(*a) {
                    res.push((*a, kernels::reduce_broadcast(g, val(*a).numel(), |_| 1.0)));
                }
                if want(*b) {
                    res.push((*b, kernels::reduce_broadcast(g, val(*b).numel(), |_| sign)));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                if want(*a) {
                    let nb = db.len();
                    res.push((*a, kernels::reduce_broadcast(g, da.len(), |k| db[k % nb])));
                }
                if want(*b) {
                    let na = da.len();
                    res.push((*b, kernels::reduce_broadcast(g, db.len(), |k| da[k % na])));
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let (na, nb) = (da.len(), db.len());
                if want(*a) {
                    res.push((*a, kernels::reduce_broadcast(g, na, |k| 1.0 / db[k % nb])));
                }
                if want(*b) {
                    res.push((
                        *b,
                        kernels::reduce_broadcast(g, nb, |k| {
                            let y = db[k % nb];
                            -da[k % na] / (y * y)
                        }),
                    ));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Shift(x) | Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Sigmoid(x) => {
                let y = out.data();
                res.push((*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Tanh(x) => {
                let y = out.data();
                res.push((*x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()));
            }
            Op::Relu(x) => {
                let xs = val(*x).data();
                res.push((
                    *x,
                    g.iter().zip(xs).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect(),
                ));
            }
            Op::Abs(x) => {
                let xs = val(*x).data();
                res.push((*x, g.iter().zip(xs).map(|(g, v)| g * kernels::sign(*v)).collect()));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if want(*a) {
                    res.push((*a, kernels::mm_grad_lhs(g, tb.data(), m, k, n)));
                }
                if want(*b) {
                    res.push((*b, kernels::mm_grad_rhs(ta.data(), g, m, k, n)));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = out.numel() / n.max(1);
                if want(*x) {
                    res.push((*x, kernels::mm_grad_lhs(g, tw.data(), m, k, n)));
                }
                if want(*w) {
                    res.push((*w, kernels::mm_grad_rhs(tx.data(), g, m, k, n)));
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    res.push((b, kernels::reduce_broadcast(g, n, |_| 1.0)));
                }
            }
            Op::Transpose(x) => {
                let s = out.shape();
                res.push((*x, kernels::transpose(g, s[0], s[1])));
            }
            Op::Softmax { x, axis } => {
                res.push((*x, kernels::softmax_backward(g, out.data(), out.shape(), *axis, false)));
            }
            Op::LogSoftmax { x, axis } => {
                res.push((*x, kernels::softmax_backward(g, out.data(), out.shape(), *axis, true)));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let gm = val(*gamma).data();
                let xs = val(*x).data();
                let d = gm.len();
                let rows = mean.len();
                let mut dx = vec![0.0; xs.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let (mu, is) = (mean[r], inv_std[r]);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        xhat[j] = (xs[r * d + j] - mu) * is;
                        let gy = g[r * d + j];
                        dgamma[j] += gy * xhat[j];
                        dbeta[j] += gy;
                        dxhat[j] = gy * gm[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        dx[r * d + j] = is / dn * (dn * dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                res.push((*x, dx));
                res.push((*gamma, dgamma));
                res.push((*beta, dbeta));
            }
            Op::Conv1d { x, kernel, stride } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let geom = kernels::ConvGeom {
                    t_in: tx.shape()[0],
                    d_in: tx.shape()[1],
                    width: tk.shape()[0],
                    d_out: tk.shape()[2],
                    stride: *stride,
                };
                let (dx, dk) = kernels::conv1d_backward(g, tx.data(), tk.data(), &geom);
                res.push((*x, dx));
                res.push((*kernel, dk));
            }
            Op::Attention { q, k, v, heads, mask } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let geom = AttnGeom::new(tq.shape(), tk.shape(), tv.shape(), *heads);
                let (u, t) = (geom.u, geom.t);
                let (dq_all, dv_all) = (tq.shape()[1], tv.shape()[1]);
                let mut dq = vec![0.0; u * dq_all];
                let mut dk = vec![0.0; t * dq_all];
                let mut dv = vec![0.0; t * dv_all];
                for h in 0..*heads {
                    let probs = geom.probs(tq.data(), tk.data(), mask.as_deref(), h);
                    let gh = kernels::cols(g, u, dv_all, h * geom.dv, geom.dv);
                    let vh = kernels::cols(tv.data(), t, dv_all, h * geom.dv, geom.dv);
                    // dP = dOut·vᵀ, dV = Pᵀ·dOut
                    let mut dp = vec![0.0; u * t];
                    let vt = kernels::transpose(&vh, t, geom.dv);
                    kernels::mm(&gh, &vt, &mut dp, u, geom.dv, t);
                    let dvh = kernels::mm_grad_rhs(&probs, &gh, u, t, geom.dv);
                    kernels::put_cols(&mut dv, &dvh, t, dv_all, h * geom.dv, geom.dv);
                    let ds = kernels::softmax_backward(&dp, &probs, &[u, t], 1, false);
                    let qh = kernels::cols(tq.data(), u, dq_all, h * geom.dk, geom.dk);
                    let kh = kernels::cols(tk.data(), t, dq_all, h * geom.dk, geom.dk);
                    let mut dqh = vec![0.0; u * geom.dk];
                    kernels::mm(&ds, &kh, &mut dqh, u, t, geom.dk);
                    dqh.iter_mut().for_each(|x| *x *= geom.scale);
                    kernels::put_cols(&mut dq, &dqh, u, dq_all, h * geom.dk, geom.dk);
                    let mut dkh = kernels::mm_grad_rhs(&ds, &qh, u, t, geom.dk);
                    dkh.iter_mut().for_each(|x| *x *= geom.scale);
                    kernels::put_cols(&mut dk, &dkh, t, dq_all, h * geom.dk, geom.dk);
                }
                if want(*v) {
                    res.push((*v, dv));
                }
                if want(*q) {
                    res.push((*q, dq));
                }
                if want(*k) {
                    res.push((*k, dk));
                }
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; val(*x).numel()])),
            Op::SliceRows { x, start } => {
                let tx = val(*x);
                let row: usize = tx.shape()[1..].iter().product();
                let mut dx = vec![0.0; tx.numel()];
                dx[start * row..start * row + g.len()].copy_from_slice(g);
                res.push((*x, dx));
            }
            Op::SliceCols { x, start } => {
                let tx = val(*x);
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                let w = out.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                res.push((*x, dx));
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = val(x).numel();
                    if want(x) {
                        res.push((x, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut col = 0;
                for &x in xs {
                    let w = val(x).shape()[1];
                    if want(x) {
                        let mut dx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dx.extend_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        res.push((x, dx));
                    }
                    col += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let tt = val(*table);
                let d = tt.shape()[1];
                let mut dt = vec![0.0; tt.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
                res.push((*table, dt));
            }
            Op::Pick { x, idx } => {
                let tx = val(*x);
                let c = tx.shape()[1];
                let mut dx = vec![0.0; tx.numel()];
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * c + j] += g[i];
                }
                res.push((*x, dx));
            }
            Op::OuterAdd(a, b) => {
                let s = out.shape();
                let (t, u, d) = (s[0], s[1], s[2]);
                let mut da = vec![0.0; t * d];
                let mut db = vec![0.0; u * d];
                for ti in 0..t {
                    for ui in 0..u {
                        let base = (ti * u + ui) * d;
                        for j in 0..d {
                            da[ti * d + j] += g[base + j];
                            db[ui * d + j] += g[base + j];
                        }
                    }
                }
                res.push((*a, da));
                res.push((*b, db));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let grads = op.backward(g, &ins, out)?;
                for (&x, gx) in inputs.iter().zip(grads) {
                    if let Some(gx) = gx {
                        if gx.len() != val(x).numel() {
                            return Err(Error::dim(op.name(), val(x).shape(), &[gx.len()]));
                        }
                        res.push((x, gx));
                    }
                }
            }
        }
        Ok(res)
    }
}
