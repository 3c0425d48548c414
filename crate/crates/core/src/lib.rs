//! Cascaded pixel-space flow matching at desk scale.
//!
//! A single transformer models every resolution stage of a dyadic ladder.
//! Generation starts from Gaussian noise at the lowest resolution, integrates
//! the learned velocity field within each stage, and moves to the next stage
//! by nearest upsampling plus renoising.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod flow;
pub mod image;
pub mod numerics;
pub mod resample;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
