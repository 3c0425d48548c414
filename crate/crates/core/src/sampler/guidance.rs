use crate::error::{Error, Result};
use crate::image::Image;
use crate::schedule::StageSchedule;

/// Guidance fractions at evenly spaced positions along the denoising order,
/// from the lowest-resolution stage to the final one.
pub const CFG_ANCHORS: [f64; 4] = [0.0, 1.0 / 6.0, 2.0 / 3.0, 1.0];

/// `v_uncond + w·(v_cond − v_uncond)`.
pub fn cfg_velocity(v_cond: &Image, v_uncond: &Image, w: f64) -> Result<Image> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::invalid(format!("cfg weight must be non-negative, got {w}")));
    }
    v_cond.same_dims(v_uncond, "cfg_velocity")?;
    Ok(v_cond.with_values(
        v_cond
            .values()
            .iter()
            .zip(v_uncond.values())
            .map(|(c, u)| u + w * (c - u))
            .collect(),
    ))
}

/// Anchor curve sampled at `u ∈ [0, 1]`, piecewise linear.
fn anchor_fraction(u: f64) -> f64 {
    let segs = (CFG_ANCHORS.len() - 1) as f64;
    let x = (u * segs).clamp(0.0, segs);
    let i = (x.floor() as usize).min(CFG_ANCHORS.len() - 2);
    let frac = x - i as f64;
    if frac == 0.0 {
        return CFG_ANCHORS[i];
    }
    CFG_ANCHORS[i] + frac * (CFG_ANCHORS[i + 1] - CFG_ANCHORS[i])
}

/// Default guidance fraction of stage `s`; a single-stage schedule gets the full weight.
pub fn stage_cfg_fraction(s: usize, sched: &StageSchedule) -> Result<f64> {
    let n = sched.stages();
    if s >= n {
        return Err(Error::Schedule(format!("stage {s} out of range for {n} stages")));
    }
    if n == 1 {
        return Ok(1.0);
    }
    Ok(anchor_fraction((n - 1 - s) as f64 / (n - 1) as f64))
}

/// `1 + f_s·(cfg_max − 1)` with the default fraction for stage `s`.
pub fn stage_cfg_weight(s: usize, sched: &StageSchedule, cfg_max: f64) -> Result<f64> {
    if !(cfg_max >= 1.0 && cfg_max.is_finite()) {
        return Err(Error::invalid(format!("cfg_max must be >= 1, got {cfg_max}")));
    }
    Ok(1.0 + stage_cfg_fraction(s, sched)? * (cfg_max - 1.0))
}
