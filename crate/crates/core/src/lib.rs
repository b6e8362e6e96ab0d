//! Multimodal gated mixture-of-experts question answering for copy-move forgery,
//! with the tensor engine, layers, synthetic data generator, and training pipeline it runs on.

pub mod ablate;
pub mod checks;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod mmoe;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
