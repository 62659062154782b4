use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelType};
use crate::numerics::{Rng, Scalar, Tensor};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ModelParams<S> {
    fn default() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }
}

enum Init {
    Zeros,
    Ones,
    Xavier,
    Normal(f64),
}

impl<S: Scalar> ModelParams<S> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<S>>) -> Self {
        ModelParams { tensors }
    }

    /// Fresh parameters. Output heads start at zero so an untrained model
    /// predicts the uniform distribution.
    pub fn init(config: &ModelConfig, content: usize, kind: ModelType, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ff;
        let ctc_classes = content + 1;
        let mut p = ModelParams::default();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            let t = match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::filled(shape, S::one()),
                Init::Xavier => {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    Tensor::from_fn(shape, |_| S::of((2.0 * rng.uniform() - 1.0) * bound))
                }
                Init::Normal(std) => Tensor::from_fn(shape, |_| S::of(rng.normal() * std)),
            };
            p.tensors.insert(name, t.with_grad());
        };

        let linear = |add: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, i: usize, o: usize| {
            add(format!("{name}.weight"), vec![i, o], Init::Xavier);
            add(format!("{name}.bias"), vec![o], Init::Zeros);
        };
        let norm = |add: &mut dyn FnMut(String, Vec<usize>, Init), name: &str| {
            add(format!("{name}.gain"), vec![d], Init::Ones);
            add(format!("{name}.bias"), vec![d], Init::Zeros);
        };

        linear(&mut add, "enc.embed", config.downsample_factor * config.feat_dim, d);
        for l in 0..config.enc_layers {
            let pre = format!("enc.layers.{l}");
            norm(&mut add, &format!("{pre}.norm1"));
            for proj in ["q", "k", "v", "out"] {
                linear(&mut add, &format!("{pre}.self_attn.{proj}"), d, d);
            }
            norm(&mut add, &format!("{pre}.norm2"));
            linear(&mut add, &format!("{pre}.ff.w1"), d, f);
            linear(&mut add, &format!("{pre}.ff.w2"), f, d);
        }
        norm(&mut add, "enc.norm");
        add("ctc.weight".into(), vec![d, ctc_classes], Init::Zeros);
        add("ctc.bias".into(), vec![ctc_classes], Init::Zeros);

        if kind.has_decoder() {
            add("dec.embed".into(), vec![content + 5, d], Init::Normal(1.0));
            for l in 0..config.dec_layers {
                let pre = format!("dec.layers.{l}");
                norm(&mut add, &format!("{pre}.norm1"));
                for proj in ["q", "k", "v", "out"] {
                    linear(&mut add, &format!("{pre}.self_attn.{proj}"), d, d);
                }
                norm(&mut add, &format!("{pre}.norm2"));
                for proj in ["q", "k", "v", "out"] {
                    linear(&mut add, &format!("{pre}.src_attn.{proj}"), d, d);
                }
                norm(&mut add, &format!("{pre}.norm3"));
                linear(&mut add, &format!("{pre}.ff.w1"), d, f);
                linear(&mut add, &format!("{pre}.ff.w2"), f, d);
            }
            norm(&mut add, "dec.norm");
            add("dec.out.weight".into(), vec![d, content + 1], Init::Zeros);
            add("dec.out.bias".into(), vec![content + 1], Init::Zeros);
        }
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::CheckpointIncompatible(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.tensors.values_mut().for_each(|t| t.set_requires_grad(on));
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Errors unless both sets have the same names and shapes.
    pub fn check_compatible(&self, other: &ModelParams<S>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::CheckpointIncompatible(format!(
                "{} tensors vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb {
                return Err(Error::CheckpointIncompatible(format!("{na} vs {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::CheckpointIncompatible(format!(
                    "{na}: shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matches_closed_form() {
        let cfg = ModelConfig::default();
        for kind in [ModelType::CtcOnly, ModelType::ArJoint, ModelType::MaskCtc] {
            let p = ModelParams::<f32>::init(&cfg, 20, kind, &mut Rng::new(0)).unwrap();
            assert_eq!(p.numel(), cfg.param_count(20, kind), "{kind}");
        }
        let odd = ModelConfig {
            enc_layers: 1,
            dec_layers: 3,
            heads: 2,
            d_model: 6,
            d_ff: 5,
            downsample_factor: 3,
            dropout_rate: 0.0,
            feat_dim: 7,
        };
        let p = ModelParams::<f64>::init(&odd, 4, ModelType::MaskCtc, &mut Rng::new(0)).unwrap();
        assert_eq!(p.numel(), odd.param_count(4, ModelType::MaskCtc));
    }

    #[test]
    fn ctc_only_has_no_decoder() {
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 20, ModelType::CtcOnly, &mut Rng::new(0)).unwrap();
        assert!(p.names().all(|n| !n.starts_with("dec.")));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = ModelParams::<f32>::init(&cfg, 20, ModelType::MaskCtc, &mut Rng::new(3)).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 20, ModelType::MaskCtc, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
    }
}
