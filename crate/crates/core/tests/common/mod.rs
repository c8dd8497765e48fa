//! Reference implementations used as oracles by the integration suites.
//! They share no code with the library beyond its tensor type.

#![allow(dead_code)]

use cift::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug)]
pub enum RefMode {
    /// Fire exactly this many cells.
    Train(usize),
    /// Fire the normalised residue when it reaches the threshold.
    Infer(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefOutput {
    pub cells: Vec<Vec<f64>>,
    /// `(frame, first, second)` per crossing.
    pub splits: Vec<(usize, f64, f64)>,
    pub residue: f64,
}

/// Scalar loop over frames and feature channels. Returns `None` when a
/// training-mode run ends more than one cell short.
pub fn reference_cif(h: &[Vec<f64>], alpha: &[f64], beta: f64, mode: RefMode) -> Option<RefOutput> {
    let d = h.first().map_or(0, Vec::len);
    let cap = match mode {
        RefMode::Train(n) => n,
        RefMode::Infer(_) => usize::MAX,
    };
    let mut cells: Vec<Vec<f64>> = Vec::new();
    let mut splits = Vec::new();
    let mut cell = vec![0.0; d];
    let mut filled = 0.0;
    for (t, &a) in alpha.iter().enumerate() {
        let mut left = a;
        while cells.len() < cap {
            let gap = beta - filled;
            if left < gap {
                for j in 0..d {
                    cell[j] += left * h[t][j];
                }
                filled += left;
                break;
            }
            for j in 0..d {
                cell[j] += gap * h[t][j];
            }
            let rest = left - gap;
            splits.push((t, gap, rest));
            cells.push(std::mem::replace(&mut cell, vec![0.0; d]));
            filled = 0.0;
            left = rest;
        }
    }
    let mut residue = filled;
    match mode {
        RefMode::Train(n) => {
            if cells.len() + 1 == n {
                splits.push((alpha.len().saturating_sub(1), filled, 0.0));
                cells.push(cell);
                residue = 0.0;
            } else if cells.len() < n {
                return None;
            }
        }
        RefMode::Infer(threshold) => {
            if filled > 0.0 && filled >= threshold {
                splits.push((alpha.len().saturating_sub(1), filled, 0.0));
                cells.push(cell.iter().map(|v| v / filled).collect());
            }
        }
    }
    Some(RefOutput { cells, splits, residue })
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Sum over every frame-level labelling of `[T, C]` logits (blank last)
/// whose collapse equals `targets`.
pub fn brute_ctc_prob(logits: &Tensor, targets: &[usize]) -> f64 {
    let (t_len, c) = (logits.shape()[0], logits.shape()[1]);
    let blank = c - 1;
    let probs: Vec<Vec<f64>> = (0..t_len).map(|t| softmax(logits.row(t))).collect();
    let mut total = 0.0;
    let mut labels = vec![0usize; t_len];
    for code in 0..c.pow(t_len as u32) {
        let mut x = code;
        for l in labels.iter_mut() {
            *l = x % c;
            x /= c;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &l in &labels {
            if Some(l) != prev && l != blank {
                collapsed.push(l);
            }
            prev = Some(l);
        }
        if collapsed == targets {
            total += labels.iter().enumerate().map(|(t, &l)| probs[t][l]).product::<f64>();
        }
    }
    total
}

/// Sum over every transducer alignment of `[T, U+1, V+1]` logits (blank
/// last): each path interleaves `U` emissions with `T` blanks and ends with
/// a blank on the last frame.
pub fn brute_rnnt_prob(logits: &Tensor, targets: &[usize]) -> f64 {
    let s = logits.shape();
    let (t_len, u1, c) = (s[0], s[1], s[2]);
    let blank = c - 1;
    let probs: Vec<Vec<f64>> = (0..t_len * u1)
        .map(|i| softmax(&logits.data()[i * c..(i + 1) * c]))
        .collect();
    let mut total = 0.0;
    // each path is a sequence of moves: true = emit, false = blank
    let moves = t_len + targets.len();
    for mask in 0u64..(1u64 << moves) {
        if mask.count_ones() as usize != targets.len() || mask >> (moves - 1) & 1 == 1 {
            continue;
        }
        let (mut t, mut u, mut p) = (0, 0, 1.0);
        for m in 0..moves {
            let row = &probs[t * u1 + u];
            if mask >> m & 1 == 1 {
                p *= row[targets[u]];
                u += 1;
            } else {
                p *= row[blank];
                t += 1;
            }
        }
        total += p;
    }
    total
}

pub fn random_targets(r: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| r.random_range(0..vocab)).collect()
}

pub fn random_weights(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| r.random_range(0.0..1.0)).collect()
}

pub fn random_frames(r: &mut ChaCha8Rng, len: usize, d: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn flatten(h: &[Vec<f64>]) -> Vec<f64> {
    h.iter().flatten().copied().collect()
}
