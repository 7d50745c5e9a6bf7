//! Lottery-ticket experiments on miniature multimodal transformers.
//!
//! The crate bundles a small reverse-mode autodiff engine, three toy
//! vision-language backbones, synthetic scene tasks, magnitude pruning with
//! rewinding, PGD adversarial training, and the report machinery used to
//! compare tickets.

pub mod adversarial;
pub mod analysis;
pub mod artifact;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mask;
pub mod model;
pub mod optim;
pub mod params;
pub mod prune;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
