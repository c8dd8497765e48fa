//! Finite-difference check of the full training objective with respect to
//! every parameter tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::gradcheck::{compare, numeric_gradient, DEFAULT_STEP};
use crate::autograd::{fault, Graph, OpKind, Tensor};
use crate::error::Result;
use crate::losses::Lambdas;
use crate::model::{self, Mode, ModelConfig, ParamStore};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Problem size of the check.
#[derive(Clone, Debug)]
pub struct GradcheckSetup {
    pub model: ModelConfig,
    pub frames: usize,
    pub target_len: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        GradcheckSetup {
            model: ModelConfig::tiny(),
            frames: 16,
            target_len: 3,
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupResult {
    pub name: String,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub mode: Mode,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub groups: Vec<GroupResult>,
}

fn loss_value(params: &ParamStore, mode: Mode, cfg: &ModelConfig, x: &Tensor, y: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false)?;
    let (l, _) = model::batch_loss(&mut g, &p, cfg, mode, &[(x, y)], Lambdas::default())?;
    Ok(g.value(l).item())
}

/// Runs the check for `mode`. `fault` corrupts one backward rule while the
/// analytic gradients are taken, for mutation testing.
pub fn run(mode: Mode, setup: &GradcheckSetup, fault_in: Option<OpKind>) -> Result<GradcheckReport> {
    let cfg = &setup.model;
    let params = model::init_params(cfg, mode, setup.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x9c);
    let x = Tensor::randn(&[setup.frames, cfg.feat_dim], 1.0, &mut rng);
    let mut y: Vec<usize> = Vec::with_capacity(setup.target_len);
    while y.len() < setup.target_len {
        let t = rng.random_range(0..cfg.vocab);
        if y.last() != Some(&t) {
            y.push(t);
        }
    }

    fault::inject(fault_in);
    let analytic = (|| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true)?;
        let (l, _) = model::batch_loss(&mut g, &p, cfg, mode, &[(&x, &y)], Lambdas::default())?;
        g.backward(l)?;
        Ok::<_, crate::Error>(p.grads(&g))
    })();
    fault::inject(None);
    let analytic = analytic?;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let groups = names
        .par_iter()
        .map(|name| {
            let base = params.get(name).expect("listed").clone();
            let numeric = numeric_gradient(
                |probe| {
                    let mut p = params.clone();
                    p.insert(name.clone(), probe.clone());
                    loss_value(&p, mode, cfg, &x, &y)
                },
                &base,
                setup.step,
            )?;
            let rep = compare(analytic.get(name).expect("bound").clone(), numeric, setup.tolerance);
            Ok(GroupResult {
                name: name.clone(),
                scalars: base.numel(),
                max_rel_err: rep.max_rel_err,
                max_abs_err: rep.max_abs_err,
                passed: rep.passed(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        mode,
        tolerance: setup.tolerance,
        max_rel_err,
        passed: groups.iter().all(|g| g.passed),
        groups,
    })
}
