//! Raw slice kernels shared by forward and backward rules.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, summing over `k` in increasing order.
pub fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `g[m×n] · b[k×n]ᵀ`
pub fn mm_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · g[m×n]`
pub fn mm_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Columns `start..start + w` of a row-major `[rows, cols]` matrix.
pub fn cols(x: &[f64], rows: usize, cols: usize, start: usize, w: usize) -> Vec<f64> {
    if start == 0 && w == cols {
        return x.to_vec();
    }
    let mut out = Vec::with_capacity(rows * w);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + start + w]);
    }
    out
}

/// Writes `src` (`[rows, w]`) into columns `start..start + w` of `dst`.
pub fn put_cols(dst: &mut [f64], src: &[f64], rows: usize, cols: usize, start: usize, w: usize) {
    for r in 0..rows {
        dst[r * cols + start..r * cols + start + w].copy_from_slice(&src[r * w..(r + 1) * w]);
    }
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Sums a broadcast gradient back onto an operand of `n` elements:
/// `out[k % n] += g[k] * f(k)`.
pub fn reduce_broadcast(g: &[f64], n: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    if n == 0 {
        return out;
    }
    for (k, gv) in g.iter().enumerate() {
        out[k % n] += gv * f(k);
    }
    out
}

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Max-subtracted softmax (or log-softmax) along `axis`. Rows whose maximum is
/// `-inf` produce zeros under softmax.
pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_geometry(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                if log {
                    (0..len).for_each(|j| out[idx(j)] = f64::NEG_INFINITY);
                }
                continue;
            }
            let z: f64 = (0..len).map(|j| (x[idx(j)] - max).exp()).sum();
            if log {
                let lz = z.ln();
                for j in 0..len {
                    out[idx(j)] = x[idx(j)] - max - lz;
                }
            } else {
                for j in 0..len {
                    out[idx(j)] = (x[idx(j)] - max).exp() / z;
                }
            }
        }
    }
    out
}

/// Backward of [`softmax_axis`] given its output `y`.
pub fn softmax_backward(g: &[f64], y: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_geometry(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            if log {
                let gs: f64 = (0..len).map(|j| g[idx(j)]).sum();
                for j in 0..len {
                    let k = idx(j);
                    let p = if y[k] == f64::NEG_INFINITY { 0.0 } else { y[k].exp() };
                    dx[k] = g[k] - p * gs;
                }
            } else {
                let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                for j in 0..len {
                    let k = idx(j);
                    dx[k] = y[k] * (g[k] - dot);
                }
            }
        }
    }
    dx
}

pub struct ConvGeom {
    pub t_in: usize,
    pub d_in: usize,
    pub width: usize,
    pub d_out: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn t_out(&self) -> usize {
        if self.t_in == 0 {
            0
        } else {
            (self.t_in - 1) / self.stride + 1
        }
    }

    fn pad(&self) -> usize {
        (self.width - 1) / 2
    }

    /// Input frame feeding tap `j` of output frame `to`, if inside the signal.
    fn source(&self, to: usize, j: usize) -> Option<usize> {
        let pos = (to * self.stride + j) as isize - self.pad() as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }
}

pub fn conv1d_forward(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let t_out = g.t_out();
    let mut out = vec![0.0; t_out * g.d_out];
    for to in 0..t_out {
        let orow = &mut out[to * g.d_out..(to + 1) * g.d_out];
        for j in 0..g.width {
            let Some(ti) = g.source(to, j) else { continue };
            for c in 0..g.d_in {
                let xv = x[ti * g.d_in + c];
                let krow = &kernel[(j * g.d_in + c) * g.d_out..(j * g.d_in + c + 1) * g.d_out];
                for (o, kv) in orow.iter_mut().zip(krow) {
                    *o += xv * kv;
                }
            }
        }
    }
    out
}

pub fn conv1d_backward(grad: &[f64], x: &[f64], kernel: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for to in 0..g.t_out() {
        let grow = &grad[to * g.d_out..(to + 1) * g.d_out];
        for j in 0..g.width {
            let Some(ti) = g.source(to, j) else { continue };
            for c in 0..g.d_in {
                let base = (j * g.d_in + c) * g.d_out;
                let krow = &kernel[base..base + g.d_out];
                dx[ti * g.d_in + c] += grow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                let xv = x[ti * g.d_in + c];
                for (dkv, gv) in dk[base..base + g.d_out].iter_mut().zip(grow) {
                    *dkv += xv * gv;
                }
            }
        }
    }
    (dx, dk)
}
