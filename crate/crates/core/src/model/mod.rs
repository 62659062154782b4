//! Transformer encoder-decoder with a CTC head on the encoder and a token
//! head on the decoder.

pub mod checkpoint;
mod config;
mod params;
mod transformer;
mod vocab;

pub use config::{ModelConfig, ModelType, LAYER_NORM_EPS};
pub use params::ModelParams;
pub use transformer::{positional_encoding, Bound, Dropout};
pub use vocab::Vocab;

use crate::error::Result;
use crate::numerics::{Rng, Scalar};

/// A parameter set together with everything needed to run it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub kind: ModelType,
    pub params: ModelParams<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, vocab: Vocab, kind: ModelType, rng: &mut Rng) -> Result<Self> {
        let params = ModelParams::init(&config, vocab.content_size(), kind, rng)?;
        Ok(Model {
            config,
            vocab,
            kind,
            params,
        })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            kind: self.kind,
            params: self.params.cast(),
        }
    }
}
