//! Sparse contextual bigram (SCB) tasks and the training dynamics of a
//! one-layer linear transformer on them.

pub mod data;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod model;
pub mod oracle;
pub mod population;
pub mod rng;
pub mod trainer;
pub mod transfer;

pub use error::{Result, ScbError};
pub use geometry::{Dims, GroundTruth, Mat, ModelParams, Vector};
pub use rng::RngSeed;
