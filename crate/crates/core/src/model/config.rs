use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which objective a parameter set was trained with. Decides which
/// parameters exist and which decoding modes are allowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelType {
    /// Encoder and CTC head only.
    CtcOnly,
    /// CTC plus a causal attention decoder.
    ArJoint,
    /// CTC plus a bidirectional masked-token decoder.
    #[serde(rename = "maskctc", alias = "mask_ctc")]
    MaskCtc,
}

impl ModelType {
    pub fn has_decoder(self) -> bool {
        !matches!(self, ModelType::CtcOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelType::CtcOnly => "ctc_only",
            ModelType::ArJoint => "ar_joint",
            ModelType::MaskCtc => "maskctc",
        }
    }
}

impl fmt::Display for ModelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc_only" => Ok(ModelType::CtcOnly),
            "ar_joint" => Ok(ModelType::ArJoint),
            "maskctc" | "mask_ctc" => Ok(ModelType::MaskCtc),
            other => Err(Error::Config(format!("unknown model type {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Consecutive input frames stacked into one encoder frame.
    pub downsample_factor: usize,
    pub dropout_rate: f64,
    /// Width of one input feature frame.
    pub feat_dim: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            downsample_factor: 2,
            dropout_rate: 0.1,
            feat_dim: 24,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration: 12 encoder and 6 decoder layers.
    pub fn full_scale(feat_dim: usize) -> Self {
        ModelConfig {
            enc_layers: 12,
            dec_layers: 6,
            heads: 4,
            d_model: 256,
            d_ff: 2048,
            downsample_factor: 4,
            dropout_rate: 0.1,
            feat_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_layers", self.enc_layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("downsample_factor", self.downsample_factor),
            ("feat_dim", self.feat_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count for `content` vocabulary tokens.
    ///
    /// With `d = d_model`, `f = d_ff`, `V = content`:
    /// - encoder: `k·D·d + d + E·(4d² + 2df + 9d + f) + 2d`
    /// - CTC head: `(d + 1)(V + 1)`
    /// - decoder: `(V + 5)·d + N·(8d² + 2df + 15d + f) + 2d + (d + 1)(V + 1)`
    pub fn param_count(&self, content: usize, kind: ModelType) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let v = content;
        let attn = 4 * (d * d + d);
        let ff = d * f + f + f * d + d;
        let norm = 2 * d;
        let enc_layer = attn + ff + 2 * norm;
        let encoder = self.downsample_factor * self.feat_dim * d + d + self.enc_layers * enc_layer + norm;
        let ctc = (d + 1) * (v + 1);
        let mut total = encoder + ctc;
        if kind.has_decoder() {
            let dec_layer = 2 * attn + ff + 3 * norm;
            total += (v + 5) * d + self.dec_layers * dec_layer + norm + (d + 1) * (v + 1);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_checked() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::full_scale(83).validate().is_ok());
    }

    #[test]
    fn model_type_names_round_trip() {
        for t in [ModelType::CtcOnly, ModelType::ArJoint, ModelType::MaskCtc] {
            assert_eq!(t.as_str().parse::<ModelType>().unwrap(), t);
        }
        assert!("beam".parse::<ModelType>().is_err());
    }
}
