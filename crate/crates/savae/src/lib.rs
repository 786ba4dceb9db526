//! Text variational autoencoder with a dedicated syntactic latent variable.
//!
//! The library provides the full pipeline: a small reverse-mode autodiff
//! engine over f32 tensors ([`autodiff`]), LSTM building blocks ([`layers`]),
//! the three-encoder/two-decoder model with its mixture-posterior losses
//! ([`model`]), the Adam training loop and binary checkpoints ([`training`]),
//! greedy/sampled/beam generation ([`decoding`]), and the quantitative
//! evaluation suite including a small averaged-perceptron tagger
//! ([`evaluation`]). Corpora arrive pre-tokenized and pre-tagged ([`corpus`]).

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod decoding;
pub mod evaluation;
pub mod layers;
pub mod model;
pub mod training;

pub use error::{Error, Result};
