use super::log_add;
use crate::autograd::kernels::softmax_axis;
use crate::autograd::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

const NEG: f64 = f64::NEG_INFINITY;

/// Negative log-likelihood of `targets` under `logits: [T, V+1]` (blank is
/// the last column), and its gradient with respect to the logits.
pub fn ctc_nll(logits: &Tensor, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    ctc_core(logits, targets, true)
}

fn ctc_core(logits: &Tensor, targets: &[usize], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::dim("ctc_loss", s, &[targets.len()]));
    }
    let (t_len, c) = (s[0], s[1]);
    let blank = c - 1;
    if t_len == 0 {
        return Err(Error::DegenerateInput("ctc loss over zero frames".into()));
    }
    if let Some(&id) = targets.iter().find(|&&y| y >= blank) {
        return Err(Error::Vocabulary { id, vocab: blank });
    }
    let lp = softmax_axis(logits.data(), s, 1, true);
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(targets.iter().flat_map(|&y| [y, blank]))
        .collect();
    let n = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let at = |t: usize, k: usize| lp[t * c + k];

    let mut alpha = vec![NEG; t_len * n];
    alpha[0] = at(0, blank);
    if n > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..n {
            let mut a = alpha[(t - 1) * n + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * n + s - 1]);
            }
            if skip(s) {
                a = log_add(a, alpha[(t - 1) * n + s - 2]);
            }
            if a > NEG {
                alpha[t * n + s] = a + at(t, ext[s]);
            }
        }
    }
    let last = (t_len - 1) * n;
    let mut log_p = alpha[last + n - 1];
    if n > 1 {
        log_p = log_add(log_p, alpha[last + n - 2]);
    }
    if log_p == NEG {
        return Err(Error::InfeasibleSample(format!(
            "{} frames cannot emit {} labels",
            t_len,
            targets.len()
        )));
    }

    if !want_grad {
        return Ok((-log_p, Vec::new()));
    }
    let mut beta = vec![NEG; t_len * n];
    beta[last + n - 1] = at(t_len - 1, ext[n - 1]);
    if n > 1 {
        beta[last + n - 2] = at(t_len - 1, ext[n - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..n {
            let mut b = beta[(t + 1) * n + s];
            if s + 1 < n {
                b = log_add(b, beta[(t + 1) * n + s + 1]);
            }
            if s + 2 < n && skip(s + 2) {
                b = log_add(b, beta[(t + 1) * n + s + 2]);
            }
            if b > NEG {
                beta[t * n + s] = b + at(t, ext[s]);
            }
        }
    }

    let mut grad = vec![0.0; t_len * c];
    for t in 0..t_len {
        let row = &mut grad[t * c..(t + 1) * c];
        for s in 0..n {
            let occ = alpha[t * n + s] + beta[t * n + s] - at(t, ext[s]) - log_p;
            if occ > NEG {
                row[ext[s]] -= occ.exp();
            }
        }
        let total: f64 = row.iter().sum();
        for (r, &l) in row.iter_mut().zip(&lp[t * c..(t + 1) * c]) {
            *r -= l.exp() * total;
        }
    }
    Ok((-log_p, grad))
}

/// Keeps only the targets; the gradient is recomputed from the logits.
struct CtcOp {
    targets: Vec<usize>,
}

impl CustomOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Vec<f64>>>> {
        let (_, grad) = ctc_core(inputs[0], &self.targets, true)?;
        Ok(vec![Some(grad.into_iter().map(|v| v * grad_out[0]).collect())])
    }

    fn saved_bytes(&self) -> usize {
        self.targets.len() * std::mem::size_of::<usize>()
    }
}

/// CTC loss as a scalar graph node over raw `logits: [T, V+1]`.
pub fn ctc_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (nll, _) = ctc_core(g.value(logits), targets, false)?;
    let op = CtcOp {
        targets: targets.to_vec(),
    };
    g.custom(&[logits], Tensor::scalar(nll), Box::new(op))
}
