//! Skeleton action recognition through action sentences.
//!
//! A convolutional codec turns skeleton sequences into short sequences of
//! tokens from a codebook on the Poincare ball, shaped by usage and
//! embedding regularizers. A small pre-trained language model, adapted
//! with low-rank adapters, reads those sentences and names the action.

pub mod biasreg;
pub mod codec;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod poincare;
pub mod recognizer;
pub mod skeldata;

pub use error::{CoreError, Result};
