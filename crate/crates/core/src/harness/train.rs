use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint;
use super::config::RunConfig;
use super::optim::Adam;
use crate::autograd::{Graph, Tensor};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{self, ParamStore};

/// One line of the metrics log.
#[derive(Clone, Debug, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub ctc_skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<StepMetrics>,
}

/// Cycles through shuffled epochs of the corpus.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_da7a),
            order: (0..n).collect(),
            pos: n,
        };
        s.reshuffle_if_done();
        s
    }

    fn reshuffle_if_done(&mut self) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            self.reshuffle_if_done();
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss and parameter gradients of the batch mean.
pub fn batch_gradients(
    cfg: &RunConfig,
    params: &ParamStore,
    items: &[(&Tensor, &[usize])],
) -> Result<(LossBreakdown, ParamStore, usize)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true)?;
    let (loss, per) = model::batch_loss(&mut g, &p, &cfg.model, cfg.mode, items, cfg.lambdas)?;
    g.backward(loss)?;
    let grads = p.grads(&g);
    let skipped = per.iter().filter(|l| l.ctc_skipped).count();
    let parts: Vec<LossBreakdown> = per.iter().map(|l| l.breakdown).collect();
    Ok((LossBreakdown::mean(&parts), grads, skipped))
}

/// Trains from `init` (or a fresh initialisation from `cfg.seed`). Each step
/// appends a line to `cfg.metrics`; the final parameters are written to
/// `cfg.checkpoint`. A non-finite loss or gradient stops training with a
/// numerical error after saving the last finite parameters.
pub fn train(cfg: &RunConfig, data: &[Utterance], init: Option<ParamStore>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() && cfg.steps > 0 {
        return Err(Error::Schema("training corpus is empty".into()));
    }
    let mut params = match init {
        Some(p) => p,
        None => model::init_params(&cfg.model, cfg.mode, cfg.seed)?,
    };
    let mut log = match &cfg.metrics {
        Some(path) => Some(std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        )),
        None => None,
    };
    let mut opt = Adam::new(cfg.optim.clone());
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let items: Vec<(&Tensor, &[usize])> = idx
            .iter()
            .map(|&i| (&data[i].features, data[i].targets.as_slice()))
            .collect();
        let (loss, grads, ctc_skipped) = batch_gradients(cfg, &params, &items)?;
        if !loss.total.is_finite() || !grads.all_finite() {
            if let Some(path) = &cfg.checkpoint {
                checkpoint::save(path, &params, cfg)?;
            }
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {step} (total = {})",
                loss.total
            )));
        }
        let (lr, grad_norm) = opt.update(&mut params, &grads);
        let m = StepMetrics {
            step,
            lr,
            loss,
            grad_norm,
            ctc_skipped,
            wall_time: cfg.log_wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        if let (Some(w), Some(path)) = (log.as_mut(), &cfg.metrics) {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        history.push(m);
    }
    if let (Some(w), Some(path)) = (log.as_mut(), &cfg.metrics) {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &cfg.checkpoint {
        checkpoint::save(path, &params, cfg)?;
    }
    Ok(TrainOutcome { params, history })
}
