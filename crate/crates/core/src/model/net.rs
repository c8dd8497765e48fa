//! Forward computation: encoder, predictor, joint networks and the
//! per-utterance training objectives of both modes.

use super::{layers, Mode, ModelConfig};
use crate::autograd::{Graph, Tensor, Var};
use crate::cif::{self, FireMode};
use crate::error::{Error, Result};
use crate::losses::{self, Lambdas, LossBreakdown, LossTerms};
use crate::model::params::Bound;

/// `features: [T0, d_f]` to `[T, d]` with `T = ceil(ceil(T0 / 2) / 2)`.
pub fn encode(g: &mut Graph, features: Var, p: &Bound, cfg: &ModelConfig) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if s.len() != 2 || s[1] != cfg.feat_dim {
        return Err(Error::dim("encode", &s, &[0, cfg.feat_dim]));
    }
    if ModelConfig::encoded_len(s[0]) == 0 {
        return Err(Error::DegenerateInput("utterance has no frames".into()));
    }
    let mut x = features;
    for conv in ["encoder.conv1", "encoder.conv2"] {
        x = g.conv1d(x, p.get(&format!("{conv}.weight"))?, 2)?;
        x = g.add(x, p.get(&format!("{conv}.bias"))?)?;
        x = g.relu(x)?;
    }
    x = layers::add_positions(g, x)?;
    for l in 0..cfg.enc_layers {
        x = layers::block(g, x, p, &format!("encoder.layers.{l}"), cfg.heads)?;
    }
    layers::layer_norm(g, x, p, "encoder.norm")
}

/// Predictor rows for `[BOS, history...]`: one row per position, each a
/// function of its own input token only.
pub fn predict(g: &mut Graph, history: &[usize], p: &Bound, cfg: &ModelConfig) -> Result<Var> {
    if let Some(&id) = history.iter().find(|&&y| y >= cfg.vocab) {
        return Err(Error::Vocabulary { id, vocab: cfg.vocab });
    }
    let ids: Vec<usize> = std::iter::once(cfg.bos()).chain(history.iter().copied()).collect();
    predictor_rows(g, &ids, p)
}

pub(crate) fn predictor_rows(g: &mut Graph, ids: &[usize], p: &Bound) -> Result<Var> {
    let e = g.gather_rows(p.get("predictor.embed")?, ids)?;
    let z = layers::linear(g, e, p, "predictor.proj")?;
    layers::layer_norm(g, z, p, "predictor.norm")
}

/// Gated, low-rank bilinear fusion of length-aligned `c` and `z`.
pub fn ugbp_join(g: &mut Graph, c: Var, z: Var, p: &Bound) -> Result<Var> {
    let (sc, sz) = (g.shape(c).to_vec(), g.shape(z).to_vec());
    if sc != sz {
        return Err(Error::Alignment(format!(
            "joint inputs differ in shape: acoustic {sc:?}, predictor {sz:?}"
        )));
    }
    let w = |n: &str| p.get(&format!("joint.{n}"));
    let gc = g.linear(c, w("w_gc")?, None)?;
    let gz = g.linear(z, w("w_gz")?, Some(w("gate_bias")?))?;
    let gate = g.add(gc, gz)?;
    let gate = g.sigmoid(gate)?;
    let h_gate = g.mul(gate, z)?;
    let a = g.linear(c, w("w_a")?, None)?;
    let a = g.tanh(a)?;
    let b = g.linear(h_gate, w("w_b")?, None)?;
    let b = g.tanh(b)?;
    let ab = g.mul(a, b)?;
    let h_bi = g.linear(ab, w("w_p")?, None)?;
    let s1 = g.linear(c, w("w_1")?, None)?;
    let s2 = g.linear(z, w("w_2")?, None)?;
    let sum = g.add(h_bi, s1)?;
    let sum = g.add(sum, s2)?;
    g.tanh(sum)
}

/// Broadcast joint of the baseline: `[T, U+1, V+1]` logits.
pub fn rnnt_join_baseline(g: &mut Graph, h: Var, z: Var, p: &Bound) -> Result<Var> {
    let a = g.linear(h, p.get("rnnt_joint.w_enc")?, None)?;
    let b = g.linear(z, p.get("rnnt_joint.w_pred")?, None)?;
    let s = g.outer_add(a, b)?;
    let s = g.tanh(s)?;
    layers::linear(g, s, p, "rnnt_joint.out")
}

/// Loss node and diagnostics for one utterance.
#[derive(Clone, Debug)]
pub struct UtteranceLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Embeddings fired in training mode (CIF-T only).
    pub fire_count: usize,
    /// The CTC term was dropped because the frames cannot emit the target.
    pub ctc_skipped: bool,
}

fn ctc_term(g: &mut Graph, h: Var, p: &Bound, targets: &[usize]) -> Result<(Option<Var>, bool)> {
    let logits = layers::linear(g, h, p, "ctc_head")?;
    match losses::ctc_loss(g, logits, targets) {
        Ok(v) => Ok((Some(v), false)),
        Err(Error::InfeasibleSample(_)) => Ok((None, true)),
        Err(e) => Err(e),
    }
}

fn check_targets(targets: &[usize], cfg: &ModelConfig) -> Result<()> {
    match targets.iter().find(|&&y| y >= cfg.vocab) {
        Some(&id) => Err(Error::Vocabulary { id, vocab: cfg.vocab }),
        None => Ok(()),
    }
}

/// Full CIF-T objective for one utterance.
pub fn cift_utterance_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    features: &Tensor,
    targets: &[usize],
    lambdas: Lambdas,
) -> Result<UtteranceLoss> {
    check_targets(targets, cfg)?;
    let u = targets.len();
    let x = g.constant(features.clone())?;
    let h = encode(g, x, p, cfg)?;
    let t_len = g.shape(h)[0];
    let w = cif::predict_weights(g, h, p, &vec![true; t_len])?;
    let quantity = cif::quantity_loss(g, &w, u)?;
    let w = cif::scale_weights(g, &w, u)?;
    let fired = cif::integrate_and_fire(g, h, &w, cfg.beta, FireMode::Train { target_len: u })?;
    let c = cif::funnel_cif(g, fired.fired, h, p, None)?;
    let c = cif::context_blocks(g, c, p, cfg.ctx_layers, cfg.heads)?;

    let (joint, lm) = if u == 0 {
        let zero = g.constant(Tensor::scalar(0.0))?;
        (zero, zero)
    } else {
        let z = predict(g, &targets[..u - 1], p, cfg)?;
        let j = ugbp_join(g, c, z, p)?;
        let logits = layers::linear(g, j, p, "classifier")?;
        let joint = losses::joint_ce(g, logits, targets)?;
        let lm_logits = layers::linear(g, z, p, "lm_head")?;
        (joint, losses::lm_ce(g, lm_logits, targets)?)
    };
    let (ctc, ctc_skipped) = ctc_term(g, h, p, targets)?;
    let terms = LossTerms {
        joint: Some(joint),
        rnnt: None,
        lm,
        quantity: Some(quantity),
        ctc,
    };
    let (total, breakdown) = losses::combine(g, &terms, lambdas)?;
    Ok(UtteranceLoss {
        total,
        breakdown,
        fire_count: fired.fire_count,
        ctc_skipped,
    })
}

/// Baseline objective: transducer loss plus the LM and CTC auxiliaries.
pub fn rnnt_utterance_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    features: &Tensor,
    targets: &[usize],
    lambdas: Lambdas,
) -> Result<UtteranceLoss> {
    check_targets(targets, cfg)?;
    let u = targets.len();
    let x = g.constant(features.clone())?;
    let h = encode(g, x, p, cfg)?;
    let z = predict(g, targets, p, cfg)?;
    let logits = rnnt_join_baseline(g, h, z, p)?;
    let rnnt = losses::rnnt_loss(g, logits, targets)?;
    let lm = if u == 0 {
        g.constant(Tensor::scalar(0.0))?
    } else {
        let zu = g.slice_rows(z, 0, u)?;
        let lm_logits = layers::linear(g, zu, p, "lm_head")?;
        losses::lm_ce(g, lm_logits, targets)?
    };
    let (ctc, ctc_skipped) = ctc_term(g, h, p, targets)?;
    let terms = LossTerms {
        joint: None,
        rnnt: Some(rnnt),
        lm,
        quantity: None,
        ctc,
    };
    let (total, breakdown) = losses::combine(g, &terms, lambdas)?;
    Ok(UtteranceLoss {
        total,
        breakdown,
        fire_count: 0,
        ctc_skipped,
    })
}

/// Mean of the per-utterance totals over `items`, built in one graph.
pub fn batch_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    mode: Mode,
    items: &[(&Tensor, &[usize])],
    lambdas: Lambdas,
) -> Result<(Var, Vec<UtteranceLoss>)> {
    if items.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut per = Vec::with_capacity(items.len());
    let mut acc: Option<Var> = None;
    for (features, targets) in items {
        let l = match mode {
            Mode::Cift => cift_utterance_loss(g, p, cfg, features, targets, lambdas)?,
            Mode::RnntBaseline => rnnt_utterance_loss(g, p, cfg, features, targets, lambdas)?,
        };
        acc = Some(match acc {
            None => l.total,
            Some(a) => g.add(a, l.total)?,
        });
        per.push(l);
    }
    let mean = g.scale(acc.expect("non-empty"), 1.0 / items.len() as f64)?;
    Ok((mean, per))
}
