//! Continuous integrate-and-fire alignment: weight prediction, training-time
//! scaling, the quantity loss, the funnel attention residual and the context
//! blocks run over the fired sequence.

mod fire;

pub use fire::{fire, plan, Boundary, FireMode, FirePlan, Residue, DEFAULT_BETA, DEFAULT_TAIL_THRESHOLD};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::layers;
use crate::model::params::{Bound, ParamSpec};

/// Per-frame firing weights.
#[derive(Clone, Debug)]
pub struct CifWeights {
    /// `[T]`, in (0, 1) on valid frames and exactly 0 on masked ones.
    pub alpha: Var,
    /// `[T]`, present after [`scale_weights`].
    pub alpha_scaled: Option<Var>,
    pub frame_mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct CifOutput {
    /// `[fire_count, d]`
    pub fired: Var,
    pub boundaries: Vec<Boundary>,
    pub residue: Residue,
    pub fire_count: usize,
    pub consumed: f64,
    pub tail_fired: bool,
    pub spans: Vec<(usize, usize)>,
}

pub fn weight_head_specs(d: usize) -> Vec<ParamSpec> {
    let mut specs = vec![
        ParamSpec::new(
            "cif.conv.weight",
            &[3, d, d],
            crate::model::params::Init::Xavier {
                fan_in: 3 * d,
                fan_out: d,
            },
        ),
        ParamSpec::bias("cif.conv.bias", d),
    ];
    specs.extend(layers::linear_specs("cif.fc", d, 1));
    specs
}

/// `alpha = sigmoid(FC(Conv(H)))`, forced to zero on masked frames.
pub fn predict_weights(g: &mut Graph, h: Var, p: &Bound, frame_mask: &[bool]) -> Result<CifWeights> {
    let t_len = g.shape(h)[0];
    if frame_mask.len() != t_len {
        return Err(Error::dim("predict_weights.mask", &[frame_mask.len()], &[t_len]));
    }
    let c = g.conv1d(h, p.get("cif.conv.weight")?, 1)?;
    let c = g.add(c, p.get("cif.conv.bias")?)?;
    let logit = layers::linear(g, c, p, "cif.fc")?;
    let logit = g.reshape(logit, &[t_len])?;
    let mut alpha = g.sigmoid(logit)?;
    if frame_mask.iter().any(|m| !m) {
        let m = Tensor::vector(frame_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        let m = g.constant(m)?;
        alpha = g.mul(alpha, m)?;
    }
    Ok(CifWeights {
        alpha,
        alpha_scaled: None,
        frame_mask: frame_mask.to_vec(),
    })
}

/// Rescales the weights so they sum to `target_len`. Masked frames are zero
/// and therefore do not enter the denominator.
pub fn scale_weights(g: &mut Graph, w: &CifWeights, target_len: usize) -> Result<CifWeights> {
    let total = g.sum(w.alpha)?;
    let sum = g.value(total).item();
    let scaled = if sum > 0.0 {
        let target = g.constant(Tensor::scalar(target_len as f64))?;
        let factor = g.div(target, total)?;
        g.mul(w.alpha, factor)?
    } else if target_len == 0 {
        g.scale(w.alpha, 0.0)?
    } else {
        return Err(Error::DegenerateInput(format!(
            "firing weights sum to {sum}; cannot scale to {target_len}"
        )));
    };
    Ok(CifWeights {
        alpha_scaled: Some(scaled),
        ..w.clone()
    })
}

/// Integrates `h: [T, d]` with the weights selected by `mode`: the scaled
/// weights in training, the raw ones at inference.
pub fn integrate_and_fire(g: &mut Graph, h: Var, w: &CifWeights, beta: f64, mode: FireMode) -> Result<CifOutput> {
    let alpha = match mode {
        FireMode::Train { .. } => w
            .alpha_scaled
            .ok_or_else(|| Error::Config("training-mode firing needs scaled weights".into()))?,
        FireMode::Infer { .. } => w.alpha,
    };
    let (fired, plan) = fire(g, h, alpha, beta, mode)?;
    Ok(CifOutput {
        fired,
        boundaries: plan.boundaries,
        residue: plan.residue,
        fire_count: plan.fire_count,
        consumed: plan.consumed,
        tail_fired: plan.tail_fired,
        spans: plan.spans,
    })
}

/// `|Σ alpha − target_len|` on the unscaled weights.
pub fn quantity_loss(g: &mut Graph, w: &CifWeights, target_len: usize) -> Result<Var> {
    let total = g.sum(w.alpha)?;
    let diff = g.shift(total, -(target_len as f64))?;
    g.abs(diff)
}

pub fn funnel_specs(d: usize) -> Vec<ParamSpec> {
    layers::attention_specs("funnel", d)
}

/// `C' = C + Attention(q = C, kv = H)`, single head.
pub fn funnel_cif(g: &mut Graph, c: Var, h: Var, p: &Bound, mask: Option<&Tensor>) -> Result<Var> {
    if g.shape(c)[0] == 0 {
        return Ok(c);
    }
    let a = layers::multi_head_attention(g, c, h, p, "funnel", 1, mask)?;
    g.add(c, a)
}

pub fn context_specs(d: usize, hidden: usize, layers_n: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for l in 0..layers_n {
        specs.extend(layers::block_specs(&format!("context.layers.{l}"), d, hidden));
    }
    if layers_n > 0 {
        specs.extend(layers::norm_specs("context.norm", d));
    }
    specs
}

/// Self-attention blocks over the fired sequence. `layers_n == 0` is the
/// identity.
pub fn context_blocks(g: &mut Graph, c: Var, p: &Bound, layers_n: usize, heads: usize) -> Result<Var> {
    if layers_n == 0 || g.shape(c)[0] == 0 {
        return Ok(c);
    }
    let mut x = layers::add_positions(g, c)?;
    for l in 0..layers_n {
        x = layers::block(g, x, p, &format!("context.layers.{l}"), heads)?;
    }
    layers::layer_norm(g, x, p, "context.norm")
}
