//! Re-draws the predictor's parameters and measures the change in CER.

use serde::Serialize;

use super::eval::evaluate;
use crate::data::Utterance;
use crate::error::Result;
use crate::model::{predictor_specs, Mode, ModelConfig, ParamStore};

#[derive(Clone, Debug, Serialize)]
pub struct ProbeRow {
    pub mode: Mode,
    pub seed: u64,
    pub cer_before: f64,
    pub cer_after: f64,
    pub delta_cer: f64,
}

/// `params` with every predictor tensor re-initialised from `seed`.
pub fn reinit_predictor(params: &ParamStore, cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut out = params.clone();
    for spec in predictor_specs(cfg) {
        out.insert(spec.name.clone(), spec.sample(seed));
    }
    out
}

pub fn reinit_probe(
    params: &ParamStore,
    cfg: &ModelConfig,
    mode: Mode,
    data: &[Utterance],
    seeds: &[u64],
) -> Result<Vec<ProbeRow>> {
    let before = evaluate(params, cfg, mode, data)?.cer;
    seeds
        .iter()
        .map(|&seed| {
            let after = evaluate(&reinit_predictor(params, cfg, seed), cfg, mode, data)?.cer;
            Ok(ProbeRow {
                mode,
                seed,
                cer_before: before,
                cer_after: after,
                delta_cer: after - before,
            })
        })
        .collect()
}
