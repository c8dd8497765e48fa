//! Greedy decoding for both model families.

use serde::{Deserialize, Serialize};

use super::net::{encode, predictor_rows, ugbp_join};
use super::params::ParamStore;
use super::{layers, ModelConfig};
use crate::autograd::{Graph, Tensor};
use crate::cif::{self, FireMode};
use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// Softmax row behind each emitted token.
    pub step_posteriors: Vec<Vec<f64>>,
    /// Frame (after down-sampling) at which each token was produced.
    pub boundaries: Vec<usize>,
    /// Embeddings fired at inference (CIF-T only).
    pub fire_count: usize,
    /// Sum of the raw firing weights (CIF-T only).
    pub weight_sum: f64,
}

impl DecodeResult {
    /// Probability of each emitted token.
    pub fn top1(&self) -> Vec<f64> {
        self.tokens
            .iter()
            .zip(&self.step_posteriors)
            .map(|(&y, row)| row[y])
            .collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Threshold firing, then one classifier step per fired embedding, feeding
/// each emitted token back to the predictor.
pub fn greedy_decode_cift(
    params: &ParamStore,
    cfg: &ModelConfig,
    features: &Tensor,
    max_len: usize,
) -> Result<DecodeResult> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false)?;
    let x = g.constant(features.clone())?;
    let h = encode(&mut g, x, &p, cfg)?;
    let t_len = g.shape(h)[0];
    let w = cif::predict_weights(&mut g, h, &p, &vec![true; t_len])?;
    let mode = FireMode::Infer {
        tail_threshold: cfg.tail_threshold,
    };
    let fired = cif::integrate_and_fire(&mut g, h, &w, cfg.beta, mode)?;
    let weight_sum = g.value(w.alpha).data().iter().sum();
    let mut out = DecodeResult {
        fire_count: fired.fire_count,
        weight_sum,
        ..DecodeResult::default()
    };
    if fired.fire_count == 0 {
        return Ok(out);
    }
    let c = cif::funnel_cif(&mut g, fired.fired, h, &p, None)?;
    let c = cif::context_blocks(&mut g, c, &p, cfg.ctx_layers, cfg.heads)?;
    let mut prev = cfg.bos();
    for u in 0..fired.fire_count.min(max_len) {
        let cu = g.slice_rows(c, u, u + 1)?;
        let z = predictor_rows(&mut g, &[prev], &p)?;
        let j = ugbp_join(&mut g, cu, z, &p)?;
        let logits = layers::linear(&mut g, j, &p, "classifier")?;
        let probs = g.softmax(logits, 1)?;
        let row = g.value(probs).data().to_vec();
        let y = argmax(&row);
        out.tokens.push(y);
        out.step_posteriors.push(row);
        out.boundaries.push(fired.boundaries[u].frame);
        prev = y;
    }
    Ok(out)
}

/// Frame-synchronous greedy search: a blank argmax advances the frame, any
/// other symbol is emitted, at most `max_symbols_per_frame` per frame.
pub fn greedy_decode_rnnt(
    params: &ParamStore,
    cfg: &ModelConfig,
    features: &Tensor,
    max_symbols_per_frame: usize,
) -> Result<DecodeResult> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false)?;
    let x = g.constant(features.clone())?;
    let h = encode(&mut g, x, &p, cfg)?;
    let a = g.linear(h, p.get("rnnt_joint.w_enc")?, None)?;
    let t_len = g.shape(a)[0];
    let blank = cfg.blank();
    let mut out = DecodeResult::default();
    let mut prev = cfg.bos();
    let mut b = {
        let z = predictor_rows(&mut g, &[prev], &p)?;
        g.linear(z, p.get("rnnt_joint.w_pred")?, None)?
    };
    for t in 0..t_len {
        let at = g.slice_rows(a, t, t + 1)?;
        for _ in 0..max_symbols_per_frame.max(1) {
            let s = g.add(at, b)?;
            let s = g.tanh(s)?;
            let logits = layers::linear(&mut g, s, &p, "rnnt_joint.out")?;
            let probs = g.softmax(logits, 1)?;
            let row = g.value(probs).data().to_vec();
            let y = argmax(&row);
            if y == blank {
                break;
            }
            out.tokens.push(y);
            out.step_posteriors.push(row);
            out.boundaries.push(t);
            prev = y;
            let z = predictor_rows(&mut g, &[prev], &p)?;
            b = g.linear(z, p.get("rnnt_joint.w_pred")?, None)?;
        }
    }
    Ok(out)
}
