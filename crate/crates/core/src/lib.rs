//! Seat pressure maps in, language out.
//!
//! The crate turns pressure-mat readings into soft tokens for a small causal
//! language model, fine-tunes that model with LoRA on pressure–text pairs, builds
//! scored training corpora with retrieval-augmented generation, and scores
//! generated text with BLEU, ROUGE-L, METEOR and an embedding F-score.

pub mod align;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod clients;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod pressure;
pub mod prompt;
pub mod rng;
pub mod sensor;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ParseError, Result};
pub use tensor::Tensor;
