//! Conjugate generative model for recognition trained on synthetic renders.

pub mod camera;
pub mod error;
pub mod eval;
pub mod generative;
pub mod losses;
pub mod nn;
pub mod noise;
pub mod render;
pub mod tensor;
pub mod trainer;
pub mod zigzag;

pub use error::{Error, Result};
