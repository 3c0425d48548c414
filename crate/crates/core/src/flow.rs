//! Training examples on the multi-scale linear paths.
//!
//! Stage `s` interpolates between
//!
//! ```text
//! start = t0 * Up(Down(x1, 2^(s+1))) + (1 - t0) * eps
//! end   = t1 * Down(x1, 2^s)         + (1 - t1) * eps
//! ```
//!
//! with a single `eps` shared by both endpoints, and the network regresses the
//! constant velocity `end - start` of `x(tau) = tau * end + (1 - tau) * start`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::resample::{downsample, upsample};
use crate::schedule::StageSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub x_t: Image,
    pub v_target: Image,
    pub stage: usize,
    pub tau: f64,
    pub t: f64,
    /// `None` when the label was dropped for the unconditional branch.
    pub class_label: Option<usize>,
}

/// Start and end states of stage `s` for clean image `x1` and stage noise `eps`.
pub fn make_endpoints(x1: &Image, eps: &Image, s: usize, sched: &StageSchedule) -> Result<(Image, Image)> {
    let res = sched.resolution(s)?;
    let target = sched.target_resolution();
    if x1.height() != target || x1.width() != target {
        return Err(Error::invalid(format!(
            "make_endpoints: clean image is {}x{}, expected {target}x{target}",
            x1.height(),
            x1.width()
        )));
    }
    if eps.dims() != (x1.channels(), res, res) {
        let (c, h, w) = eps.dims();
        return Err(Error::Shape {
            op: "make_endpoints",
            lhs: vec![x1.channels(), res, res],
            rhs: vec![c, h, w],
        });
    }
    let (t0, t1) = sched.interval(s)?;

    let x_start = if t0 == 0.0 {
        eps.clone()
    } else {
        let coarse = upsample(&downsample(x1, 1 << (s + 1))?, 2)?;
        coarse.lincomb(t0, eps, 1.0 - t0)?
    };
    let clean_end = downsample(x1, 1 << s)?;
    let x_end = if t1 == 1.0 {
        clean_end
    } else {
        clean_end.lincomb(t1, eps, 1.0 - t1)?
    };
    Ok((x_start, x_end))
}

/// `tau * x_end + (1 - tau) * x_start`.
pub fn interpolate(x_start: &Image, x_end: &Image, tau: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("interpolate: tau {tau} outside [0, 1]")));
    }
    x_start.same_dims(x_end, "interpolate")?;
    // Pinned endpoints so tau = 0 and tau = 1 reproduce the states bit-for-bit.
    if tau == 0.0 {
        return Ok(x_start.clone());
    }
    if tau == 1.0 {
        return Ok(x_end.clone());
    }
    x_end.lincomb(tau, x_start, 1.0 - tau)
}

pub fn velocity_target(x_start: &Image, x_end: &Image) -> Result<Image> {
    x_end.lincomb(1.0, x_start, -1.0)
}

/// Draws stage, rescaled time, noise and label dropout, in that order.
pub fn sample_training_example<R: Rng + ?Sized>(
    x1: &Image,
    label: usize,
    sched: &StageSchedule,
    p_drop: f64,
    rng: &mut R,
) -> Result<TrainingExample> {
    let stage = rng.random_range(0..sched.stages());
    let tau: f64 = rng.random();
    let res = sched.resolution(stage)?;
    let eps = Image::randn(x1.channels(), res, res, rng);
    let dropped = rng.random::<f64>() < p_drop;

    let (x_start, x_end) = make_endpoints(x1, &eps, stage, sched)?;
    Ok(TrainingExample {
        x_t: interpolate(&x_start, &x_end, tau)?,
        v_target: velocity_target(&x_start, &x_end)?,
        stage,
        tau,
        t: sched.global_time(stage, tau)?,
        class_label: if dropped { None } else { Some(label) },
    })
}

/// Mean of squared element-wise differences.
pub fn mse_loss(pred: &Image, target: &Image) -> Result<f64> {
    pred.same_dims(target, "mse_loss")?;
    let n = pred.values().len() as f64;
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}
