//! Multi-tab webpage fingerprinting toolkit.
//!
//! The pipeline: synthetic or ingested sessions ([`trace`]) are augmented
//! ([`augment`]), embedded by a convolutional encoder ([`encoder`]) trained
//! with a multi-label proxy/sample metric loss ([`loss`], [`train`]), and
//! identified with a dual proxy/sample k-NN ([`identify`]). [`eval`] scores
//! rankings with Recall@k and AP@k.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod identify;
pub mod loss;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
