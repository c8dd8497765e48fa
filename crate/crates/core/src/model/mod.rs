//! Model assembly for the CIF transducer and the broadcast-joint baseline.

pub mod decode;
pub mod layers;
pub mod net;
pub mod params;

pub use decode::{greedy_decode_cift, greedy_decode_rnnt, DecodeResult};
pub use net::{
    batch_loss, cift_utterance_loss, encode, predict, rnnt_join_baseline, rnnt_utterance_loss, ugbp_join, UtteranceLoss,
};
pub use params::{Bound, Init, ParamSpec, ParamStore};

use serde::{Deserialize, Serialize};

use crate::cif;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "cift")]
    Cift,
    #[serde(rename = "rnnt-baseline")]
    RnntBaseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cift => "cift",
            Mode::RnntBaseline => "rnnt-baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cift" => Ok(Mode::Cift),
            "rnnt-baseline" | "rnnt" => Ok(Mode::RnntBaseline),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Real symbols; blank and BOS both use index `vocab`.
    pub vocab: usize,
    pub feat_dim: usize,
    pub d_model: usize,
    /// Reduced predictor embedding width.
    pub d_embed: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub ctx_layers: usize,
    /// Rank of the bilinear pooling; `0` means `d_model / 2`.
    pub rank: usize,
    pub beta: f64,
    pub tail_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 16,
            feat_dim: 16,
            d_model: 64,
            d_embed: 32,
            heads: 2,
            ffn_dim: 128,
            enc_layers: 2,
            ctx_layers: 2,
            rank: 0,
            beta: cif::DEFAULT_BETA,
            tail_threshold: cif::DEFAULT_TAIL_THRESHOLD,
        }
    }
}

impl ModelConfig {
    /// Tiny dimensions used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab: 8,
            feat_dim: 4,
            d_model: 8,
            d_embed: 4,
            heads: 2,
            ffn_dim: 8,
            enc_layers: 1,
            ctx_layers: 1,
            ..Self::default()
        }
    }

    pub fn rank(&self) -> usize {
        if self.rank == 0 {
            (self.d_model / 2).max(1)
        } else {
            self.rank
        }
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    pub fn bos(&self) -> usize {
        self.vocab
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("feat_dim", self.feat_dim),
            ("d_model", self.d_model),
            ("d_embed", self.d_embed),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.tail_threshold.is_nan() {
            return Err(Error::Config("tail_threshold is NaN".into()));
        }
        Ok(())
    }

    /// Encoder output length for `t0` input frames (two stride-2 convolutions
    /// with same padding).
    pub fn encoded_len(t0: usize) -> usize {
        t0.div_ceil(2).div_ceil(2)
    }
}

fn conv_spec(name: String, k: usize, d_in: usize, d_out: usize) -> ParamSpec {
    ParamSpec::new(
        name,
        &[k, d_in, d_out],
        Init::Xavier {
            fan_in: k * d_in,
            fan_out: d_out,
        },
    )
}

pub fn encoder_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut specs = vec![
        conv_spec("encoder.conv1.weight".into(), 3, cfg.feat_dim, d),
        ParamSpec::bias("encoder.conv1.bias", d),
        conv_spec("encoder.conv2.weight".into(), 3, d, d),
        ParamSpec::bias("encoder.conv2.bias", d),
    ];
    for l in 0..cfg.enc_layers {
        specs.extend(layers::block_specs(&format!("encoder.layers.{l}"), d, cfg.ffn_dim));
    }
    specs.extend(layers::norm_specs("encoder.norm", d));
    specs
}

/// Parameters whose names start with this prefix form the predictor.
pub const PREDICTOR_PREFIX: &str = "predictor.";

pub fn predictor_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = vec![ParamSpec::new(
        "predictor.embed",
        &[cfg.vocab + 1, cfg.d_embed],
        Init::Normal(1.0),
    )];
    specs.extend(layers::linear_specs("predictor.proj", cfg.d_embed, cfg.d_model));
    specs.extend(layers::norm_specs("predictor.norm", cfg.d_model));
    specs
}

pub fn ugbp_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, k) = (cfg.d_model, cfg.rank());
    vec![
        ParamSpec::weight("joint.w_gc", d, d),
        ParamSpec::weight("joint.w_gz", d, d),
        ParamSpec::bias("joint.gate_bias", d),
        ParamSpec::weight("joint.w_a", d, k),
        ParamSpec::weight("joint.w_b", d, k),
        ParamSpec::weight("joint.w_p", k, d),
        ParamSpec::weight("joint.w_1", d, d),
        ParamSpec::weight("joint.w_2", d, d),
    ]
}

pub fn rnnt_joint_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut specs = vec![
        ParamSpec::weight("rnnt_joint.w_enc", d, d),
        ParamSpec::weight("rnnt_joint.w_pred", d, d),
    ];
    specs.extend(layers::linear_specs("rnnt_joint.out", d, cfg.vocab + 1));
    specs
}

/// Every parameter of the model in `mode`.
pub fn param_specs(cfg: &ModelConfig, mode: Mode) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut specs = encoder_specs(cfg);
    specs.extend(predictor_specs(cfg));
    specs.extend(layers::linear_specs("ctc_head", d, cfg.vocab + 1));
    specs.extend(layers::linear_specs("lm_head", d, cfg.vocab));
    match mode {
        Mode::Cift => {
            specs.extend(cif::weight_head_specs(d));
            specs.extend(cif::funnel_specs(d));
            specs.extend(cif::context_specs(d, cfg.ffn_dim, cfg.ctx_layers));
            specs.extend(ugbp_specs(cfg));
            specs.extend(layers::linear_specs("classifier", d, cfg.vocab));
        }
        Mode::RnntBaseline => specs.extend(rnnt_joint_specs(cfg)),
    }
    specs
}

pub fn init_params(cfg: &ModelConfig, mode: Mode, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    Ok(ParamStore::from_specs(&param_specs(cfg, mode), seed))
}

#[cfg(test)]
mod tests;
