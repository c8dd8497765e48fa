//! Training objectives: cross-entropy heads, CTC, the transducer loss, a
//! brute-force path oracle for both sequence losses, and the weighted
//! combination used for the total.

mod ctc;
mod oracle;
mod rnnt;

pub use ctc::{ctc_loss, ctc_nll};
pub use oracle::{enumerate_paths_oracle, PathKind, MAX_ORACLE_PATHS};
pub use rnnt::{rnnt_loss, rnnt_nll};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Mean over rows of `-log_softmax(logits[u])[targets[u]]`. An empty target
/// contributes 0.
pub fn joint_ce(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    cross_entropy(g, logits, targets, "joint_ce")
}

/// Next-token cross-entropy of the predictor's language-model head.
pub fn lm_ce(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    cross_entropy(g, logits, targets, "lm_ce")
}

fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize], what: &str) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(Error::dim("cross_entropy", &s, &[targets.len()]));
    }
    if s[0] != targets.len() {
        return Err(Error::Alignment(format!(
            "{what}: {} logit rows for {} targets",
            s[0],
            targets.len()
        )));
    }
    if targets.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.pick(lp, targets)?;
    let m = g.mean(picked)?;
    g.scale(m, -1.0)
}

/// Weights of the auxiliary terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lm: f64,
    pub quantity: f64,
    pub ctc: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            lm: 1.0,
            quantity: 1.0,
            ctc: 0.3,
        }
    }
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lm", self.lm), ("quantity", self.quantity), ("ctc", self.ctc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub joint_ce: f64,
    pub lm_ce: f64,
    pub ctc: f64,
    pub quantity: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rnnt: Option<f64>,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossBreakdown {
    /// `joint + λ1·lm + λ2·quantity + λ3·ctc` on plain numbers.
    pub fn from_parts(joint_ce: f64, lm_ce: f64, quantity: f64, ctc: f64, l: Lambdas) -> Result<Self> {
        l.validate()?;
        Ok(LossBreakdown {
            joint_ce,
            lm_ce,
            ctc,
            quantity,
            rnnt: None,
            total: joint_ce + l.lm * lm_ce + l.quantity * quantity + l.ctc * ctc,
            lambda1: l.lm,
            lambda2: l.quantity,
            lambda3: l.ctc,
        })
    }

    /// Component-wise mean, used to reduce per-utterance breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let Some(first) = items.first() else {
            return LossBreakdown::default();
        };
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            joint_ce: avg(|b| b.joint_ce),
            lm_ce: avg(|b| b.lm_ce),
            ctc: avg(|b| b.ctc),
            quantity: avg(|b| b.quantity),
            rnnt: first.rnnt.map(|_| avg(|b| b.rnnt.unwrap_or(0.0))),
            total: avg(|b| b.total),
            lambda1: first.lambda1,
            lambda2: first.lambda2,
            lambda3: first.lambda3,
        }
    }
}

/// Graph nodes of the components for one utterance. Exactly one of `joint`
/// and `rnnt` is set; a missing `ctc` marks an infeasible CTC sample.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub joint: Option<Var>,
    pub rnnt: Option<Var>,
    pub lm: Var,
    pub quantity: Option<Var>,
    pub ctc: Option<Var>,
}

/// Builds the weighted total and reports every component.
pub fn combine(g: &mut Graph, terms: &LossTerms, l: Lambdas) -> Result<(Var, LossBreakdown)> {
    l.validate()?;
    let primary = match (terms.joint, terms.rnnt) {
        (Some(v), None) | (None, Some(v)) => v,
        _ => {
            return Err(Error::Config(
                "exactly one of the joint and transducer losses must be present".into(),
            ))
        }
    };
    let mut total = primary;
    for (term, w) in [(Some(terms.lm), l.lm), (terms.quantity, l.quantity), (terms.ctc, l.ctc)] {
        if let Some(v) = term {
            if w != 0.0 {
                let s = g.scale(v, w)?;
                total = g.add(total, s)?;
            }
        }
    }
    let val = |v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);
    let b = LossBreakdown {
        joint_ce: val(terms.joint),
        lm_ce: val(Some(terms.lm)),
        ctc: val(terms.ctc),
        quantity: val(terms.quantity),
        rnnt: terms.rnnt.map(|v| g.value(v).item()),
        total: g.value(total).item(),
        lambda1: l.lm,
        lambda2: l.quantity,
        lambda3: l.ctc,
    };
    Ok((total, b))
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
