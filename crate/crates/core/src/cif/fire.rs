//! Integrate-and-fire: forward accumulation of per-frame weights with
//! boundary splitting, and its gradient with respect to both the frames and
//! the weights.

use crate::autograd::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_TAIL_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FireMode {
    /// Weights are expected to be scaled to sum to `target_len`; exactly
    /// that many embeddings are fired.
    Train { target_len: usize },
    /// Threshold firing; the residue fires as a normalised final embedding
    /// when it reaches `tail_threshold`.
    Infer { tail_threshold: f64 },
}

/// One threshold crossing. `first` completes the current cell and `second`
/// seeds the next; `first + second == available`, where `available` is the
/// frame weight not yet assigned when the crossing happened (the full
/// `alpha_t` unless the frame already fired once).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Boundary {
    pub frame: usize,
    pub available: f64,
    pub first: f64,
    pub second: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residue {
    pub weight: f64,
    pub embedding: Vec<f64>,
}

/// Share of one frame's weight assigned to one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Piece {
    pub cell: usize,
    pub frame: usize,
    pub weight: f64,
    /// Lower end of the piece is the frame's start on the cumulative axis.
    pub starts_frame: bool,
    /// Upper end of the piece is the frame's end on the cumulative axis.
    pub ends_frame: bool,
}

/// Result of running the accumulator over plain slices.
#[derive(Clone, Debug, PartialEq)]
pub struct FirePlan {
    /// `fire_count × d`, row-major.
    pub embeddings: Vec<f64>,
    pub fire_count: usize,
    pub boundaries: Vec<Boundary>,
    pub residue: Residue,
    /// Weight assigned to fired cells, excluding a fired tail.
    pub consumed: f64,
    pub tail_fired: bool,
    /// Inclusive frame span of each fired cell.
    pub spans: Vec<(usize, usize)>,
    pub(crate) pieces: Vec<Piece>,
}

/// Runs integrate-and-fire over `h: [T, d]` (row-major) with weights
/// `alpha: [T]`.
pub fn plan(h: &[f64], d: usize, alpha: &[f64], beta: f64, mode: FireMode) -> Result<FirePlan> {
    let t_len = alpha.len();
    if h.len() != t_len * d {
        return Err(Error::dim("integrate_and_fire", &[h.len()], &[t_len, d]));
    }
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::Config(format!("firing threshold must be positive, got {beta}")));
    }
    let cap = match mode {
        FireMode::Train { target_len } => Some(target_len),
        FireMode::Infer { .. } => None,
    };

    let mut embeddings = Vec::new();
    let mut boundaries = Vec::new();
    let mut pieces = Vec::new();
    let mut spans = Vec::new();
    let mut emb = vec![0.0; d];
    let mut acc = 0.0;
    let mut open_start: Option<usize> = None;
    let mut fired = 0usize;
    let mut leftover = 0.0;
    let mut consumed = 0.0;

    for t in 0..t_len {
        let row = &h[t * d..(t + 1) * d];
        let mut remaining = alpha[t];
        let mut starts_frame = true;
        loop {
            if cap == Some(fired) {
                leftover += remaining;
                break;
            }
            let need = beta - acc;
            open_start.get_or_insert(t);
            if remaining >= need {
                let second = remaining - need;
                for (e, x) in emb.iter_mut().zip(row) {
                    *e += need * x;
                }
                pieces.push(Piece {
                    cell: fired,
                    frame: t,
                    weight: need,
                    starts_frame,
                    ends_frame: false,
                });
                boundaries.push(Boundary {
                    frame: t,
                    available: remaining,
                    first: need,
                    second,
                });
                embeddings.extend_from_slice(&emb);
                spans.push((open_start.take().unwrap_or(t), t));
                consumed += acc + need;
                emb.iter_mut().for_each(|e| *e = 0.0);
                acc = 0.0;
                fired += 1;
                remaining = second;
                starts_frame = false;
            } else {
                for (e, x) in emb.iter_mut().zip(row) {
                    *e += remaining * x;
                }
                pieces.push(Piece {
                    cell: fired,
                    frame: t,
                    weight: remaining,
                    starts_frame,
                    ends_frame: true,
                });
                acc += remaining;
                break;
            }
        }
    }

    let mut tail_fired = false;
    let residue;
    match mode {
        FireMode::Train { target_len } => {
            if fired + 1 == target_len {
                // Rounding left the last cell just short of the threshold.
                let last = t_len.saturating_sub(1);
                boundaries.push(Boundary {
                    frame: last,
                    available: acc,
                    first: acc,
                    second: 0.0,
                });
                embeddings.extend_from_slice(&emb);
                spans.push((open_start.take().unwrap_or(last), last));
                consumed += acc;
                fired += 1;
                residue = Residue {
                    weight: leftover,
                    embedding: vec![0.0; d],
                };
            } else if fired < target_len {
                return Err(Error::Alignment(format!(
                    "weights sum to about {} but {target_len} embeddings are required; scale them first",
                    consumed + acc
                )));
            } else {
                residue = Residue {
                    weight: acc + leftover,
                    embedding: emb,
                };
            }
        }
        FireMode::Infer { tail_threshold } => {
            if acc > 0.0 && acc >= tail_threshold {
                let last = t_len.saturating_sub(1);
                boundaries.push(Boundary {
                    frame: last,
                    available: acc,
                    first: acc,
                    second: 0.0,
                });
                embeddings.extend(emb.iter().map(|e| e / acc));
                spans.push((open_start.take().unwrap_or(last), last));
                fired += 1;
                tail_fired = true;
            }
            residue = Residue {
                weight: acc,
                embedding: emb,
            };
        }
    }
    pieces.retain(|p| p.cell < fired);

    Ok(FirePlan {
        embeddings,
        fire_count: fired,
        boundaries,
        residue,
        consumed,
        tail_fired,
        spans,
        pieces,
    })
}

struct FireOp {
    pieces: Vec<Piece>,
    frames: usize,
    dim: usize,
    /// Index and accumulated weight of a normalised tail cell.
    tail: Option<(usize, f64)>,
}

impl CustomOp for FireOp {
    fn name(&self) -> &'static str {
        "integrate_and_fire"
    }

    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Option<Vec<f64>>>> {
        let (t_len, d) = (self.frames, self.dim);
        let h = inputs[0].data();
        let mut dh = vec![0.0; t_len * d];
        // d(loss)/d(cumulative weight at the end of each frame)
        let mut dcum = vec![0.0; t_len];

        // For the normalised tail c = S / r: dS = g / r, dr = -(g · c) / r.
        let tail_terms = self.tail.map(|(cell, r)| {
            let g = &grad_out[cell * d..(cell + 1) * d];
            let c = &output.data()[cell * d..(cell + 1) * d];
            let dr = -g.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / r;
            (cell, r, dr)
        });

        for p in &self.pieces {
            let row = &h[p.frame * d..(p.frame + 1) * d];
            let g = &grad_out[p.cell * d..(p.cell + 1) * d];
            let (inv, dr) = match tail_terms {
                Some((cell, r, dr)) if cell == p.cell => (1.0 / r, dr),
                _ => (1.0, 0.0),
            };
            let mut dw = dr;
            for j in 0..d {
                let gs = g[j] * inv;
                dw += gs * row[j];
                dh[p.frame * d + j] += p.weight * gs;
            }
            if p.ends_frame {
                dcum[p.frame] += dw;
            }
            if p.starts_frame && p.frame > 0 {
                dcum[p.frame - 1] -= dw;
            }
        }

        // alpha_t feeds every cumulative sum from t onwards.
        let mut dalpha = vec![0.0; t_len];
        let mut run = 0.0;
        for t in (0..t_len).rev() {
            run += dcum[t];
            dalpha[t] = run;
        }
        Ok(vec![Some(dh), Some(dalpha)])
    }

    fn saved_bytes(&self) -> usize {
        self.pieces.len() * std::mem::size_of::<Piece>()
    }
}

/// Differentiable integrate-and-fire. Returns the fired embeddings as a
/// `[fire_count, d]` node together with the plan that produced them.
pub fn fire(g: &mut Graph, h: Var, alpha: Var, beta: f64, mode: FireMode) -> Result<(Var, FirePlan)> {
    let sh = g.shape(h).to_vec();
    let sa = g.shape(alpha).to_vec();
    if sh.len() != 2 || sa != [sh[0]] {
        return Err(Error::dim("integrate_and_fire", &sh, &sa));
    }
    let d = sh[1];
    let plan = plan(g.value(h).data(), d, g.value(alpha).data(), beta, mode)?;
    let value = Tensor::new(vec![plan.fire_count, d], plan.embeddings.clone())?;
    let op = FireOp {
        pieces: plan.pieces.clone(),
        frames: sh[0],
        dim: d,
        tail: plan.tail_fired.then(|| (plan.fire_count - 1, plan.residue.weight)),
    };
    let out = g.custom(&[h, alpha], value, Box::new(op))?;
    Ok((out, plan))
}
