//! Training, inference, evaluation, gradient checking and ablation for the
//! `ctxnet` command.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod infer;
pub mod selfcheck;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use infer::Model;
