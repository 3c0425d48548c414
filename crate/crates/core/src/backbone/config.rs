use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Largest image side the model is asked to process.
    pub max_resolution: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal features fed to the timestep and resolution MLPs.
    pub freq_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            depth: 6,
            heads: 4,
            patch_size: 2,
            channels: 3,
            num_classes: 8,
            max_resolution: 32,
            mlp_ratio: 4,
            freq_dim: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.hidden_dim == 0 || self.depth == 0 {
            return bad("hidden_dim, depth and heads must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(2 * self.heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by 2 * heads = {}",
                self.hidden_dim,
                2 * self.heads
            ));
        }
        if !self.head_dim().is_multiple_of(4) {
            return bad(format!(
                "head_dim {} must be divisible by 4 for two-axis rotary embedding",
                self.head_dim()
            ));
        }
        if self.patch_size == 0 || self.channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("patch_size, channels, num_classes and mlp_ratio must be positive".into());
        }
        if self.freq_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return bad(format!("freq_dim {} must be positive and even", self.freq_dim));
        }
        if self.max_resolution == 0 || !self.max_resolution.is_multiple_of(self.patch_size) {
            return bad(format!(
                "max_resolution {} must be a positive multiple of patch_size {}",
                self.max_resolution, self.patch_size
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Values per patch token: `p * p * C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }
}
