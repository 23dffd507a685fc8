//! Self-supervised deformable registration of 3D scalar volumes.

pub mod cli;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod register;
pub mod rng;
pub mod synth;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
