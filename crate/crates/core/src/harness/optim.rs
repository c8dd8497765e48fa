use super::config::OptimConfig;
use crate::model::ParamStore;

/// Learning rate at 0-based `step`: linear warmup to the peak, then
/// inverse-square-root decay.
pub fn learning_rate(o: &OptimConfig, step: usize) -> f64 {
    let s = (step + 1) as f64;
    if o.warmup_steps == 0 {
        return o.lr;
    }
    let w = o.warmup_steps as f64;
    if s <= w {
        o.lr * s / w
    } else {
        o.lr * (w / s).sqrt()
    }
}

pub fn global_norm(grads: &ParamStore) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: ParamStore,
    v: ParamStore,
    step: usize,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Adam {
            cfg,
            m: ParamStore::new(),
            v: ParamStore::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Clips `grads` to the configured global norm, applies one update and
    /// returns the learning rate used and the norm before clipping.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) -> (f64, f64) {
        let norm = global_norm(grads);
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = learning_rate(&self.cfg, self.step);
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), crate::Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), crate::Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).expect("inserted");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi * clip;
            }
            let v = self.v.get_mut(name).expect("inserted");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                let gc = gi * clip;
                *vi = b2 * *vi + (1.0 - b2) * gc * gc;
            }
            let (m, v) = (self.m.get(name).expect("m"), self.v.get(name).expect("v"));
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + self.cfg.eps);
            }
        }
        (lr, norm)
    }
}
