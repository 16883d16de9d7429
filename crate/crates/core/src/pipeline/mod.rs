//! End-to-end training, evaluation and persistence.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
