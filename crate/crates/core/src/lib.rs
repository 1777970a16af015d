//! Deep recurrent encoder-decoder models for sequence transduction.
//!
//! The crate is `no_std` (it only needs `alloc`) and contains everything that
//! is pure computation:
//!
//! - [`autodiff`]: a dense tensor type and a dynamic reverse-mode graph.
//! - [`nn`], [`cells`]: embeddings, layer normalization, MLP attention, the
//!   output network, GRU transition blocks and deep transition cells.
//! - [`encoder`], [`decoder`]: shallow, deep transition, alternating,
//!   biunidirectional and BiDeep encoders; conditional GRU, deep transition,
//!   stacked (GRU/rGRU/cGRU/crGRU) and BiDeep decoders.
//! - [`config`], [`params`], [`checkpoint`]: configuration validation,
//!   deterministic initialization, analytic parameter counting and the binary
//!   checkpoint encoding.
//! - [`data`], [`optim`], [`train`]: synthetic tasks, batching, Adam and the
//!   early-stopping training loop.
//! - [`search`], [`eval`], [`gradcheck`]: beam search, contrastive evaluation,
//!   quality metrics and the finite-difference gradient checker.
//!
//! File IO, wall clocks and the command line live in the `deep-rnmt` crate.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
mod real;
pub mod search;
pub mod train;

pub use autodiff::{Graph, Tensor, Var};
pub use config::{CellVariant, DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, ModelConfig};
pub use error::{Error, Result};
pub use params::ParameterSet;
pub use real::Real;

/// End-of-sentence token id. Appended to every source and target sentence.
pub const EOS: usize = 0;
/// Unknown-word token id.
pub const UNK: usize = 1;
