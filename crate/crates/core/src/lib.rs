//! Multitask occluded-segment reconstruction for skeleton trajectory anomaly
//! detection.
//!
//! A window of `T` frames is occluded over its past, middle or future run.
//! The encoder sees only the observed frames, a learned latent tensor stands
//! in for the hidden ones and the decoder reconstructs the full window. The
//! reconstruction error on the hidden run is the anomaly score.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod occlusion;
pub mod optim;
pub mod parallel;
pub mod scoring;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
