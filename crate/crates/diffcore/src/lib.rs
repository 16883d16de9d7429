//! # diffcore
//!
//! A small reverse-mode automatic differentiation engine over dense
//! row-major `f64` tensors.
//!
//! Build a graph on a [`Tape`] by calling its operation methods, then call
//! [`Tape::backward`] on a scalar output. Parameters live in a [`ParamSet`]
//! and are bound onto a fresh tape every step; [`AdamW`] applies updates.
//!
//! ```
//! use diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```
//!
//! All stochastic draws go through [`SeededRng`]; graph construction and the
//! backward sweep are single-threaded and deterministic, so running the same
//! graph twice yields bit-identical gradients.

pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::grad_check;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamSet};
pub use rng::SeededRng;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
