use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// `[fan_in, fan_out]` weight with Xavier init.
    pub fn weight(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self::new(name, &[fan_in, fan_out], Init::Xavier { fan_in, fan_out })
    }

    pub fn bias(name: impl Into<String>, n: usize) -> Self {
        Self::new(name, &[n], Init::Zeros)
    }

    /// Draws the initial value. The stream depends only on `(seed, name)`,
    /// so any subset of parameters can be re-drawn identically.
    pub fn sample(&self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(self.name.as_bytes()));
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                Tensor::uniform(&self.shape, bound, &mut rng)
            }
            Init::Normal(std) => Tensor::randn(&self.shape, std, &mut rng),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Self {
        let tensors = specs.iter().map(|s| (s.name.clone(), s.sample(seed))).collect();
        ParamStore { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Loads every tensor into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), g.leaf(t.clone(), requires_grad)?);
        }
        Ok(Bound { vars })
    }

    /// Like [`bind`](Self::bind), but only parameters whose name satisfies
    /// `trainable` are differentiable.
    pub fn bind_where(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), g.leaf(t.clone(), trainable(name))?);
        }
        Ok(Bound { vars })
    }
}

/// Parameters bound into a particular graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Replaces the node bound to `name`.
    pub fn with(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }

    /// Gradients of every bound parameter after `g.backward`.
    pub fn grads(&self, g: &Graph) -> ParamStore {
        let tensors = self.vars.iter().map(|(name, v)| (name.clone(), g.grad(*v))).collect();
        ParamStore { tensors }
    }
}
