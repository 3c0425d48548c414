//! Velocity transformer over packed multi-resolution patch sequences.

mod config;
mod model;
mod pack;
mod patch;
mod rope;

pub use config::ModelConfig;
pub use model::{sinusoidal_embedding, Backbone};
pub use pack::{pack, PackItem, PackedBatch, SequenceMeta};
pub use patch::{patchify, unpatchify};
pub use rope::{apply_rope_2d, rope_rotation, ROPE_BASE};

use crate::error::Result;
use crate::numerics::ParamSet;

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut ParamSet, params: &ParamSet, decay: f64) -> Result<()> {
    shadow.ema_update(params, decay)
}
