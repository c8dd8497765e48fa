//! Activation accounting of the two joint networks: analytic element counts
//! and measured peak live bytes of one forward and backward pass, plus the
//! largest batch that fits under a memory cap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::Lambdas;
use crate::model::{self, Mode, ModelConfig, ParamStore};

pub const DEFAULT_CAP_BYTES: usize = 256 * 1024 * 1024;
/// Upper end of the doubling search.
pub const MAX_SEARCH_BATCH: usize = 4096;

#[derive(Clone, Debug, Serialize)]
pub struct BenchSetup {
    /// Encoder frames after down-sampling.
    pub frames: usize,
    pub target_len: usize,
    pub vocab: usize,
    pub d_model: usize,
    pub batch: usize,
    pub cap_bytes: usize,
    pub seed: u64,
}

impl Default for BenchSetup {
    fn default() -> Self {
        BenchSetup {
            frames: 400,
            target_len: 30,
            vocab: 500,
            d_model: 64,
            batch: 1,
            cap_bytes: DEFAULT_CAP_BYTES,
            seed: 0,
        }
    }
}

/// Element counts of the fusion activations (joint hidden plus logits).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AnalyticCounts {
    /// `B·T·(U+1)·(V+1+d)`
    pub rnnt_fusion: u64,
    /// `B·U·(V+d)`
    pub cift_fusion: u64,
    pub fusion_ratio: f64,
    /// `T·(U+1)/U · (V+1)/V`
    pub logits_ratio: f64,
}

pub fn analytic_counts(b: usize, t: usize, u: usize, v: usize, d: usize) -> AnalyticCounts {
    let (b, t, u, v, d) = (b as u64, t as u64, u as u64, v as u64, d as u64);
    let rnnt_fusion = b * t * (u + 1) * (v + 1 + d);
    let cift_fusion = b * u * (v + d);
    AnalyticCounts {
        rnnt_fusion,
        cift_fusion,
        fusion_ratio: rnnt_fusion as f64 / cift_fusion.max(1) as f64,
        logits_ratio: (t * (u + 1)) as f64 / u.max(1) as f64 * (v + 1) as f64 / v as f64,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeBench {
    pub mode: Mode,
    /// Peak live bytes for `setup.batch` utterances.
    pub peak_bytes: usize,
    /// Largest batch whose pass stays under the cap.
    pub max_batch: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub setup: BenchSetup,
    pub analytic: AnalyticCounts,
    pub cift: ModeBench,
    pub rnnt: ModeBench,
    /// `cift.max_batch / rnnt.max_batch`
    pub batch_ratio: f64,
}

struct Workload {
    cfg: ModelConfig,
    params: ParamStore,
    features: Tensor,
    targets: Vec<usize>,
}

impl Workload {
    fn new(setup: &BenchSetup, mode: Mode) -> Result<Self> {
        let cfg = ModelConfig {
            vocab: setup.vocab,
            d_model: setup.d_model,
            ..ModelConfig::default()
        };
        let params = model::init_params(&cfg, mode, setup.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        let features = Tensor::randn(&[4 * setup.frames, cfg.feat_dim], 1.0, &mut rng);
        let mut targets = Vec::with_capacity(setup.target_len);
        while targets.len() < setup.target_len {
            let y = rng.random_range(0..cfg.vocab);
            if targets.last() != Some(&y) {
                targets.push(y);
            }
        }
        Ok(Workload {
            cfg,
            params,
            features,
            targets,
        })
    }

    /// Peak bytes of a forward and backward pass over `batch` copies, or
    /// `None` when the cap is exceeded.
    fn peak(&self, mode: Mode, batch: usize, cap: usize) -> Result<Option<usize>> {
        let mut g = Graph::with_memory_cap(cap);
        let run = |g: &mut Graph| -> Result<()> {
            let p = self.params.bind(g, true)?;
            let items: Vec<(&Tensor, &[usize])> =
                (0..batch).map(|_| (&self.features, self.targets.as_slice())).collect();
            let (l, _) = model::batch_loss(g, &p, &self.cfg, mode, &items, Lambdas::default())?;
            g.backward(l)
        };
        match run(&mut g) {
            Ok(()) => Ok(Some(g.peak_bytes())),
            Err(Error::OutOfMemory { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Doubling search followed by bisection.
    fn max_batch(&self, mode: Mode, cap: usize) -> Result<usize> {
        if self.peak(mode, 1, cap)?.is_none() {
            return Ok(0);
        }
        let mut lo = 1;
        let mut hi = None;
        while lo < MAX_SEARCH_BATCH {
            let b = lo * 2;
            if self.peak(mode, b, cap)?.is_some() {
                lo = b;
            } else {
                hi = Some(b);
                break;
            }
        }
        let Some(mut hi) = hi else { return Ok(lo) };
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.peak(mode, mid, cap)?.is_some() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }
}

fn bench_mode(setup: &BenchSetup, mode: Mode) -> Result<ModeBench> {
    let w = Workload::new(setup, mode)?;
    let peak_bytes = w.peak(mode, setup.batch, usize::MAX)?.expect("uncapped");
    Ok(ModeBench {
        mode,
        peak_bytes,
        max_batch: w.max_batch(mode, setup.cap_bytes)?,
    })
}

pub fn run(setup: &BenchSetup) -> Result<BenchReport> {
    if setup.frames == 0 || setup.target_len == 0 || setup.vocab < 2 || setup.batch == 0 {
        return Err(Error::Config(
            "bench-mem needs positive frames, targets and batch and vocab >= 2".into(),
        ));
    }
    let cift = bench_mode(setup, Mode::Cift)?;
    let rnnt = bench_mode(setup, Mode::RnntBaseline)?;
    let batch_ratio = if rnnt.max_batch == 0 {
        f64::INFINITY
    } else {
        cift.max_batch as f64 / rnnt.max_batch as f64
    };
    Ok(BenchReport {
        setup: setup.clone(),
        analytic: analytic_counts(setup.batch, setup.frames, setup.target_len, setup.vocab, setup.d_model),
        cift,
        rnnt,
        batch_ratio,
    })
}
