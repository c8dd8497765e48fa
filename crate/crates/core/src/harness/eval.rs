use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::model::{greedy_decode_cift, greedy_decode_rnnt, DecodeResult, Mode, ModelConfig, ParamStore};

/// Per-frame emission cap of the baseline's greedy search.
pub const MAX_SYMBOLS_PER_FRAME: usize = 3;

/// Alignment counts between a hypothesis and its reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Levenshtein distance with a minimal-cost breakdown. Among equal-cost
/// alignments the backtrace prefers matches/substitutions, then deletions.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[idx(i, 0)] = i;
    }
    for j in 0..=m {
        d[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[idx(i - 1, j - 1)] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[idx(i, j)] = sub.min(d[idx(i - 1, j)] + 1).min(d[idx(i, j - 1)] + 1);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[idx(i, j)] == d[idx(i - 1, j - 1)] + diff {
                c.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[idx(i, j)] == d[idx(i - 1, j)] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Decodes one utterance with the greedy search of `mode`.
pub fn decode_one(params: &ParamStore, cfg: &ModelConfig, mode: Mode, u: &Utterance) -> Result<DecodeResult> {
    match mode {
        Mode::Cift => greedy_decode_cift(params, cfg, &u.features, usize::MAX),
        Mode::RnntBaseline => greedy_decode_rnnt(params, cfg, &u.features, MAX_SYMBOLS_PER_FRAME),
    }
}

/// Decodes every utterance, in parallel, keeping corpus order.
pub fn decode_all(params: &ParamStore, cfg: &ModelConfig, mode: Mode, data: &[Utterance]) -> Result<Vec<DecodeResult>> {
    data.par_iter().map(|u| decode_one(params, cfg, mode, u)).collect()
}

/// Inference-time firing statistics of a CIF-T model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FireStats {
    pub mean_fire_count: f64,
    pub mean_abs_count_error: f64,
    /// Share of utterances with `|fires - targets| <= 1`.
    pub within_one: f64,
    pub exact: f64,
    /// Mean of `|sum(alpha) - targets|`.
    pub mean_quantity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Option<Mode>,
    pub utterances: usize,
    pub reference_tokens: usize,
    pub cer: f64,
    pub edits: EditCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fire: Option<FireStats>,
}

/// Micro-averaged CER over hypothesis/reference pairs.
pub fn score(results: &[DecodeResult], data: &[Utterance], mode: Mode) -> Result<EvalReport> {
    let reference_tokens: usize = data.iter().map(|u| u.targets.len()).sum();
    if reference_tokens == 0 {
        return Err(Error::Schema("reference corpus has no tokens".into()));
    }
    let mut edits = EditCounts::default();
    for (r, u) in results.iter().zip(data) {
        let e = edit_distance(&u.targets, &r.tokens);
        edits.substitutions += e.substitutions;
        edits.insertions += e.insertions;
        edits.deletions += e.deletions;
    }
    let n = data.len() as f64;
    let fire = (mode == Mode::Cift).then(|| {
        let errs: Vec<usize> = results
            .iter()
            .zip(data)
            .map(|(r, u)| r.fire_count.abs_diff(u.targets.len()))
            .collect();
        FireStats {
            mean_fire_count: results.iter().map(|r| r.fire_count as f64).sum::<f64>() / n,
            mean_abs_count_error: errs.iter().sum::<usize>() as f64 / n,
            within_one: errs.iter().filter(|&&e| e <= 1).count() as f64 / n,
            exact: errs.iter().filter(|&&e| e == 0).count() as f64 / n,
            mean_quantity: results
                .iter()
                .zip(data)
                .map(|(r, u)| (r.weight_sum - u.targets.len() as f64).abs())
                .sum::<f64>()
                / n,
        }
    });
    Ok(EvalReport {
        mode: Some(mode),
        utterances: data.len(),
        reference_tokens,
        cer: edits.total() as f64 / reference_tokens as f64,
        edits,
        fire,
    })
}

pub fn evaluate(params: &ParamStore, cfg: &ModelConfig, mode: Mode, data: &[Utterance]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Schema("empty evaluation corpus".into()));
    }
    let results = decode_all(params, cfg, mode, data)?;
    score(&results, data, mode)
}

#[derive(Serialize)]
struct Hypothesis<'a> {
    id: &'a str,
    tokens: &'a [usize],
    boundaries: &'a [usize],
    top1: Vec<f64>,
}

/// Writes one JSON line per utterance: id, tokens, boundaries and the
/// probability of each emitted token.
pub fn write_hypotheses(path: impl AsRef<Path>, data: &[Utterance], results: &[DecodeResult]) -> Result<()> {
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (u, r) in data.iter().zip(results) {
        let h = Hypothesis {
            id: &u.id,
            tokens: &r.tokens,
            boundaries: &r.boundaries,
            top1: r.top1(),
        };
        let line = serde_json::to_string(&h).map_err(|e| Error::Schema(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
