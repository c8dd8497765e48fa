use super::log_add;
use crate::autograd::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

const NEG: f64 = f64::NEG_INFINITY;

/// Log-space lattice quantities; `logits` is kept by the graph, so only
/// `T × (U+1)` arrays are stored here.
struct Lattice {
    t_len: usize,
    u1: usize,
    c: usize,
    targets: Vec<usize>,
    /// Row log-normalisers.
    lse: Vec<f64>,
    blank: Vec<f64>,
    emit: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_p: f64,
}

impl Lattice {
    fn build(logits: &Tensor, targets: &[usize]) -> Result<Self> {
        let s = logits.shape();
        let u1 = targets.len() + 1;
        if s.len() != 3 || s[1] != u1 || s[2] < 2 {
            return Err(Error::dim("rnnt_loss", s, &[s.first().copied().unwrap_or(0), u1]));
        }
        let (t_len, c) = (s[0], s[2]);
        let bl = c - 1;
        if t_len == 0 {
            return Err(Error::DegenerateInput("transducer loss over zero frames".into()));
        }
        if let Some(&id) = targets.iter().find(|&&y| y >= bl) {
            return Err(Error::Vocabulary { id, vocab: bl });
        }
        let x = logits.data();
        let n = t_len * u1;
        let (mut lse, mut blank, mut emit) = (vec![0.0; n], vec![0.0; n], vec![NEG; n]);
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(NEG, f64::max);
            let z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse[i] = z;
            blank[i] = row[bl] - z;
            let u = i % u1;
            if u < targets.len() {
                emit[i] = row[targets[u]] - z;
            }
        }
        let idx = |t: usize, u: usize| t * u1 + u;
        let mut alpha = vec![NEG; n];
        alpha[0] = 0.0;
        for t in 0..t_len {
            for u in 0..u1 {
                if t == 0 && u == 0 {
                    continue;
                }
                let mut a = NEG;
                if t > 0 {
                    a = alpha[idx(t - 1, u)] + blank[idx(t - 1, u)];
                }
                if u > 0 {
                    a = log_add(a, alpha[idx(t, u - 1)] + emit[idx(t, u - 1)]);
                }
                alpha[idx(t, u)] = a;
            }
        }
        let mut beta = vec![NEG; n];
        for t in (0..t_len).rev() {
            for u in (0..u1).rev() {
                let i = idx(t, u);
                beta[i] = if t == t_len - 1 && u == u1 - 1 {
                    blank[i]
                } else {
                    let mut b = NEG;
                    if t + 1 < t_len {
                        b = blank[i] + beta[idx(t + 1, u)];
                    }
                    if u + 1 < u1 {
                        b = log_add(b, emit[i] + beta[idx(t, u + 1)]);
                    }
                    b
                };
            }
        }
        let log_p = beta[0];
        if !log_p.is_finite() {
            return Err(Error::Numerical(format!("transducer path sum is {log_p}")));
        }
        Ok(Lattice {
            t_len,
            u1,
            c,
            targets: targets.to_vec(),
            lse,
            blank,
            emit,
            alpha,
            beta,
            log_p,
        })
    }

    fn grad(&self, logits: &[f64], scale: f64) -> Vec<f64> {
        let (u1, c) = (self.u1, self.c);
        let bl = c - 1;
        let mut out = vec![0.0; logits.len()];
        for t in 0..self.t_len {
            for u in 0..u1 {
                let i = t * u1 + u;
                let next_blank = if t + 1 < self.t_len {
                    self.beta[i + u1]
                } else if u + 1 == u1 {
                    0.0
                } else {
                    NEG
                };
                let db = -(self.alpha[i] + self.blank[i] + next_blank - self.log_p).exp();
                let de = if u + 1 < u1 {
                    -(self.alpha[i] + self.emit[i] + self.beta[i + 1] - self.log_p).exp()
                } else {
                    0.0
                };
                let total = db + de;
                let row = &logits[i * c..(i + 1) * c];
                let o = &mut out[i * c..(i + 1) * c];
                for k in 0..c {
                    o[k] = -(row[k] - self.lse[i]).exp() * total * scale;
                }
                o[bl] += db * scale;
                if u + 1 < u1 {
                    o[self.targets[u]] += de * scale;
                }
            }
        }
        out
    }
}

/// Negative log of the summed probability of every monotonic lattice path
/// through `logits: [T, U+1, V+1]` (blank is the last index), with its
/// gradient.
pub fn rnnt_nll(logits: &Tensor, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    let lat = Lattice::build(logits, targets)?;
    let grad = lat.grad(logits.data(), 1.0);
    Ok((-lat.log_p, grad))
}

struct RnntOp {
    lat: Lattice,
}

impl CustomOp for RnntOp {
    fn name(&self) -> &'static str {
        "rnnt_loss"
    }

    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(self.lat.grad(inputs[0].data(), grad_out[0]))])
    }

    fn saved_bytes(&self) -> usize {
        self.lat.alpha.len() * 8 * 5
    }
}

/// Transducer loss as a scalar graph node.
pub fn rnnt_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let lat = Lattice::build(g.value(logits), targets)?;
    let nll = -lat.log_p;
    g.custom(&[logits], Tensor::scalar(nll), Box::new(RnntOp { lat }))
}
