//! One-to-many text style transfer by splitting a sentence into a
//! style-independent content code and a sampled style code.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: fp64 tensors, a reverse-mode autodiff tape and SGD.
//! * [`corpus`]: vocabulary, tokenisation, batching and n-gram statistics.
//! * [`model`]: encoders, decoders, discriminators, the style classifier,
//!   the back-translation bridge and the statistics-swapping composition.
//! * [`training`]: every loss term and the alternating min-max loop.
//! * [`inference`]: style-code sampling and greedy / beam decoding.
//! * [`metrics`]: style, content, diversity and BLEU scores.

pub mod corpus;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
