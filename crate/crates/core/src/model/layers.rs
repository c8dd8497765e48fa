//! Building blocks shared by the encoder and the context blocks.

use super::params::{Bound, Init, ParamSpec};
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Sinusoidal position table `[t, d]`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape matches")
}

pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let pe = g.constant(positional_encoding(s[0], s[1]))?;
    g.add(x, pe)
}

pub fn norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), &[d], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), &[d], Init::Zeros),
    ]
}

pub fn layer_norm(g: &mut Graph, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    let beta = p.get(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.weight"), d_in, d_out),
        ParamSpec::bias(format!("{prefix}.bias"), d_out),
    ]
}

pub fn linear(g: &mut Graph, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

pub fn attention_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    ["wq", "wk", "wv", "wo"]
        .iter()
        .map(|w| ParamSpec::weight(format!("{prefix}.{w}"), d, d))
        .collect()
}

/// Multi-head attention from `query` rows onto `memory` rows. Heads split the
/// model dimension evenly.
pub fn multi_head_attention(
    g: &mut Graph,
    query: Var,
    memory: Var,
    p: &Bound,
    prefix: &str,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let d = g.shape(query)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
    }
    let q = g.linear(query, p.get(&format!("{prefix}.wq"))?, None)?;
    let k = g.linear(memory, p.get(&format!("{prefix}.wk"))?, None)?;
    let v = g.linear(memory, p.get(&format!("{prefix}.wv"))?, None)?;
    let ctx = g.multi_head_attention(q, k, v, heads, mask)?;
    g.linear(ctx, p.get(&format!("{prefix}.wo"))?, None)
}

pub fn feed_forward_specs(prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut specs = linear_specs(&format!("{prefix}.fc1"), d, hidden);
    specs.extend(linear_specs(&format!("{prefix}.fc2"), hidden, d));
    specs
}

pub fn feed_forward(g: &mut Graph, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let h = linear(g, x, p, &format!("{prefix}.fc1"))?;
    let h = g.relu(h)?;
    linear(g, h, p, &format!("{prefix}.fc2"))
}

/// Pre-norm self-attention + feed-forward layer (a Conformer block without
/// the convolution module).
pub fn block_specs(prefix: &str, d: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut specs = norm_specs(&format!("{prefix}.norm1"), d);
    specs.extend(attention_specs(&format!("{prefix}.attn"), d));
    specs.extend(norm_specs(&format!("{prefix}.norm2"), d));
    specs.extend(feed_forward_specs(&format!("{prefix}.ffn"), d, hidden));
    specs
}

pub fn block(g: &mut Graph, x: Var, p: &Bound, prefix: &str, heads: usize) -> Result<Var> {
    let n1 = layer_norm(g, x, p, &format!("{prefix}.norm1"))?;
    let a = multi_head_attention(g, n1, n1, p, &format!("{prefix}.attn"), heads, None)?;
    let x = g.add(x, a)?;
    let n2 = layer_norm(g, x, p, &format!("{prefix}.norm2"))?;
    let f = feed_forward(g, n2, p, &format!("{prefix}.ffn"))?;
    g.add(x, f)
}
