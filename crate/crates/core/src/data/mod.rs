//! Synthetic monotonic-alignment corpus: prototype-vector utterances with
//! known token spans, JSONL persistence and padded batching.

mod batch;
mod io;

pub use batch::{batch, Batch, PAD_TARGET};
pub use io::{read_jsonl, write_jsonl};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Longest dwell the generator accepts.
pub const MAX_DWELL: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T0, d_f]`
    pub features: Tensor,
    pub targets: Vec<usize>,
    /// Half-open frame span `[start, end)` of each target token, when known.
    pub spans: Option<Vec<(usize, usize)>>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.shape()[0]
    }

    /// Checks internal consistency: spans tile the frames in order, one per
    /// target.
    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 {
            return Err(Error::Schema(format!("{}: features must be a matrix", self.id)));
        }
        if let Some(spans) = &self.spans {
            if spans.len() != self.targets.len() {
                return Err(Error::Schema(format!(
                    "{}: {} spans for {} targets",
                    self.id,
                    spans.len(),
                    self.targets.len()
                )));
            }
            let mut at = 0;
            for &(s, e) in spans {
                if s != at || e <= s {
                    return Err(Error::Schema(format!("{}: spans do not tile the frames", self.id)));
                }
                at = e;
            }
            if !spans.is_empty() && at != self.num_frames() {
                return Err(Error::Schema(format!(
                    "{}: spans end at {at} but there are {} frames",
                    self.id,
                    self.num_frames()
                )));
            }
        }
        Ok(())
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub vocab: usize,
    pub feat_dim: usize,
    pub count: usize,
    /// Draws targets, dwells and noise.
    pub seed: u64,
    /// Draws the token prototypes; corpora sharing it share one task.
    pub task_seed: u64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub dwell_min: usize,
    pub dwell_max: usize,
    pub noise: f64,
    pub id_prefix: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            vocab: 16,
            feat_dim: 16,
            count: 2000,
            seed: 1,
            task_seed: 0,
            min_tokens: 3,
            max_tokens: 8,
            dwell_min: 4,
            dwell_max: 8,
            noise: 0.3,
            id_prefix: "utt".into(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab must be at least 2, got {}", self.vocab)));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be positive".into()));
        }
        if self.dwell_min < 1 || self.dwell_min > self.dwell_max || self.dwell_max > MAX_DWELL {
            return Err(Error::Config(format!(
                "dwell range [{}, {}] must lie within [1, {MAX_DWELL}]",
                self.dwell_min, self.dwell_max
            )));
        }
        if self.min_tokens > self.max_tokens {
            return Err(Error::Config("min_tokens exceeds max_tokens".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// One prototype vector per token.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// `[V, d_f]`
    pub prototypes: Tensor,
}

impl Task {
    pub fn new(vocab: usize, feat_dim: usize, task_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
        Task {
            prototypes: Tensor::randn(&[vocab, feat_dim], 1.0, &mut rng),
        }
    }

    /// Repeats each token's prototype for its dwell and adds isotropic
    /// Gaussian noise of standard deviation `noise`.
    pub fn render<R: Rng + ?Sized>(
        &self,
        id: impl Into<String>,
        targets: &[usize],
        dwells: &[usize],
        noise: f64,
        rng: &mut R,
    ) -> Result<Utterance> {
        let (v, d) = (self.prototypes.rows(), self.prototypes.cols());
        if targets.len() != dwells.len() {
            return Err(Error::dim("render", &[targets.len()], &[dwells.len()]));
        }
        let t0: usize = dwells.iter().sum();
        let mut data = Vec::with_capacity(t0 * d);
        let mut spans = Vec::with_capacity(targets.len());
        for (&y, &k) in targets.iter().zip(dwells) {
            if y >= v {
                return Err(Error::Vocabulary { id: y, vocab: v });
            }
            let start = data.len() / d;
            for _ in 0..k {
                for &p in self.prototypes.row(y) {
                    let n: f64 = if noise > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                    data.push(p + noise * n);
                }
            }
            spans.push((start, start + k));
        }
        Ok(Utterance {
            id: id.into(),
            features: Tensor::new(vec![t0, d], data)?,
            targets: targets.to_vec(),
            spans: Some(spans),
        })
    }
}

/// Draws `cfg.count` utterances. Consecutive targets always differ, so every
/// token boundary is visible in the features.
pub fn generate(cfg: &GenConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let task = Task::new(cfg.vocab, cfg.feat_dim, cfg.task_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let u = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let mut targets = Vec::with_capacity(u);
        for _ in 0..u {
            let y = loop {
                let y = rng.random_range(0..cfg.vocab);
                if targets.last() != Some(&y) {
                    break y;
                }
            };
            targets.push(y);
        }
        let dwells: Vec<usize> = (0..u)
            .map(|_| rng.random_range(cfg.dwell_min..=cfg.dwell_max))
            .collect();
        out.push(task.render(
            format!("{}-{i:05}", cfg.id_prefix),
            &targets,
            &dwells,
            cfg.noise,
            &mut rng,
        )?);
    }
    Ok(out)
}
