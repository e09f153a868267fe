//! Margin-softmax probability framework, the linear margin loss and a
//! teacher-student auto-encoder trainer for hyperspherical embeddings.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gate;
pub mod generator;
pub mod gradcheck;
pub mod margin;
pub mod net;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{LatseError, Result};
