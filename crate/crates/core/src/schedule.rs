//! Resolution ladder and the partition of global time into stage intervals.
//!
//! Stage `s = 0` is the target resolution, stage `S - 1` the lowest.
//! Generation runs in denoising order `S - 1, ..., 0`, which is also the
//! order of increasing global time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    stages: usize,
    target_resolution: usize,
    patch_size: usize,
    /// `boundaries[k] = k / S`; stage `s` spans `[boundaries[S-1-s], boundaries[S-s]]`.
    boundaries: Vec<f64>,
}

impl StageSchedule {
    /// Uniform partition of `[0, 1]` over `stages` dyadic resolution stages.
    pub fn new(stages: usize, target_resolution: usize, patch_size: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Schedule("at least one stage is required".into()));
        }
        if patch_size == 0 {
            return Err(Error::Schedule("patch size must be positive".into()));
        }
        if stages > 16 {
            return Err(Error::Schedule(format!("{stages} stages is beyond any supported ladder")));
        }
        let unit = (1usize << (stages - 1)) * patch_size;
        if target_resolution == 0 || !target_resolution.is_multiple_of(unit) {
            return Err(Error::Schedule(format!(
                "target resolution {target_resolution} is not divisible by 2^{} * patch {patch_size}",
                stages - 1
            )));
        }
        let kickoff = (target_resolution >> (stages - 1)) / patch_size;
        if kickoff < 2 {
            return Err(Error::Schedule(format!(
                "kickoff token grid {kickoff}x{kickoff} is below 2x2"
            )));
        }
        let boundaries = (0..=stages).map(|k| k as f64 / stages as f64).collect();
        Ok(Self {
            stages,
            target_resolution,
            patch_size,
            boundaries,
        })
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn target_resolution(&self) -> usize {
        self.target_resolution
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn lowest_stage(&self) -> usize {
        self.stages - 1
    }

    fn check_stage(&self, s: usize) -> Result<()> {
        if s >= self.stages {
            return Err(Error::Schedule(format!(
                "stage {s} out of range for {} stages",
                self.stages
            )));
        }
        Ok(())
    }

    pub fn resolution(&self, s: usize) -> Result<usize> {
        self.check_stage(s)?;
        Ok(self.target_resolution >> s)
    }

    /// Token grid extent of stage `s`.
    pub fn grid(&self, s: usize) -> Result<usize> {
        Ok(self.resolution(s)? / self.patch_size)
    }

    pub fn kickoff_grid(&self) -> usize {
        (self.target_resolution >> (self.stages - 1)) / self.patch_size
    }

    /// `(t0, t1)` of stage `s`.
    pub fn interval(&self, s: usize) -> Result<(f64, f64)> {
        self.check_stage(s)?;
        let k = self.stages - 1 - s;
        Ok((self.boundaries[k], self.boundaries[k + 1]))
    }

    /// Maps global time to `(stage, tau)`. `t = 1` belongs to stage 0 with `tau = 1`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Schedule(format!("global time {t} outside [0, 1]")));
        }
        // k indexes intervals in increasing time; stage = S - 1 - k.
        let k = (0..self.stages)
            .find(|&k| t < self.boundaries[k + 1])
            .unwrap_or(self.stages - 1);
        let (t0, t1) = (self.boundaries[k], self.boundaries[k + 1]);
        Ok((self.stages - 1 - k, (t - t0) / (t1 - t0)))
    }

    /// Inverse of [`locate`](Self::locate): `t0 + tau * (t1 - t0)`.
    pub fn global_time(&self, s: usize, tau: f64) -> Result<f64> {
        let (t0, t1) = self.interval(s)?;
        Ok(t0 + tau * (t1 - t0))
    }
}
