//! Core library for `wordgan`: an LSTM-conditioned GAN that renders one
//! image per word of a text description.
//!
//! The crate is self-contained on CPU: a reverse-mode autodiff tape
//! ([`tensor`]), the recurrent encoder ([`lstm`]), generator/discriminator
//! pair and adversarial objectives ([`nets`]), the alternating minimax
//! training loop ([`train`]), dataset and embedding plumbing ([`text`]),
//! checkpoint serialization ([`checkpoint`]) and the similarity metrics used
//! to evaluate per-word image sequences ([`eval`]).

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod imageio;
pub mod lstm;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
