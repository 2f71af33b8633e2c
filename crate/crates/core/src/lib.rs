//! Sentence ensemble distillation: a small encoder, its training objectives,
//! coupling-flow calibration and STS evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod evalsts;
pub mod experiments;
pub mod flow;
pub mod objectives;
pub mod synthetic;
pub(crate) mod train;

pub use error::{Error, Result};
