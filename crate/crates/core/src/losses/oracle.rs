//! Exhaustive path enumeration in plain probability space.

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Largest number of paths the oracle will enumerate.
pub const MAX_ORACLE_PATHS: u64 = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    /// `logits: [T, V+1]`
    Ctc,
    /// `logits: [T, U+1, V+1]`
    Rnnt,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Probability of `targets`, summed over every alignment path.
pub fn enumerate_paths_oracle(logits: &Tensor, targets: &[usize], kind: PathKind) -> Result<f64> {
    match kind {
        PathKind::Ctc => ctc(logits, targets),
        PathKind::Rnnt => rnnt(logits, targets),
    }
}

fn ctc(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::dim("enumerate_paths_oracle", s, &[targets.len()]));
    }
    let (t_len, c) = (s[0], s[1]);
    let blank = c - 1;
    let count = (c as u64).checked_pow(t_len as u32).unwrap_or(u64::MAX);
    if count > MAX_ORACLE_PATHS {
        return Err(Error::TooLarge(format!("{count} label sequences")));
    }
    let probs: Vec<Vec<f64>> = (0..t_len).map(|t| softmax_row(logits.row(t))).collect();
    let mut total = 0.0;
    let mut labels = vec![0usize; t_len];
    for mut code in 0..count {
        for l in labels.iter_mut() {
            *l = (code % c as u64) as usize;
            code /= c as u64;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &l in &labels {
            if l != blank && prev != Some(l) {
                collapsed.push(l);
            }
            prev = Some(l);
        }
        if collapsed == targets {
            total += labels.iter().enumerate().map(|(t, &l)| probs[t][l]).product::<f64>();
        }
    }
    Ok(total)
}

fn rnnt(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let s = logits.shape();
    let u1 = targets.len() + 1;
    if s.len() != 3 || s[1] != u1 || s[0] == 0 || s[2] < 2 {
        return Err(Error::dim("enumerate_paths_oracle", s, &[u1]));
    }
    let (t_len, c) = (s[0], s[2]);
    let count = binomial((t_len - 1 + targets.len()) as u64, targets.len() as u64);
    if count > MAX_ORACLE_PATHS {
        return Err(Error::TooLarge(format!("{count} lattice paths")));
    }
    let probs: Vec<Vec<f64>> = logits.data().chunks(c).map(softmax_row).collect();
    let at = |t: usize, u: usize| &probs[t * u1 + u];

    // Each path is a sequence of moves; the final blank at the top corner
    // ends it.
    let mut total = 0.0;
    let mut stack = vec![(0usize, 0usize, 1.0f64)];
    while let Some((t, u, p)) = stack.pop() {
        if t == t_len - 1 && u == u1 - 1 {
            total += p * at(t, u)[c - 1];
            continue;
        }
        if u + 1 < u1 {
            stack.push((t, u + 1, p * at(t, u)[targets[u]]));
        }
        if t + 1 < t_len {
            stack.push((t + 1, u, p * at(t, u)[c - 1]));
        }
    }
    Ok(total)
}
