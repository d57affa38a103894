//! Single-stage grid detector with a ConvLSTM history encoder.
//!
//! A base detector is trained on still frames, its backbone is frozen and
//! a ConvLSTM encoding of earlier frames is concatenated with the current
//! features in front of the prediction layer. Evaluation splits true
//! positives by ground-truth visibility to measure detection of hidden
//! objects.

pub mod cli;
pub mod convlstm;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
