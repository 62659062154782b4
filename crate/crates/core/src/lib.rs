//! Non-autoregressive sequence transduction with Mask CTC.
//!
//! A Transformer encoder with a CTC head produces a greedy first-pass
//! hypothesis. Tokens whose CTC confidence falls below a threshold are
//! replaced by `<MASK>` and filled in by a bidirectional decoder over a
//! fixed number of easy-first iterations, so the output length is the
//! greedy CTC length and decoding cost does not grow with it.
//!
//! All model math is generic over [`Scalar`]; `f32` is the working
//! precision and `f64` serves as the shadow precision for gradient and
//! oracle checks. The aliases below name the common instantiations.

pub mod corpus;
pub mod ctc;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod training;

pub use ctc::{MaskedSequence, TokenConfidence, TokenSequence};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelParams, ModelType, Vocab};
pub use numerics::{Graph, Rng, Scalar, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
