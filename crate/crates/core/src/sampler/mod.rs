//! Cascaded sampling: integrate each stage's ODE, then upsample and renoise
//! into the next stage, with a guidance weight per stage.

mod guidance;
mod ode;

pub use guidance::{cfg_velocity, stage_cfg_fraction, stage_cfg_weight, CFG_ANCHORS};
pub use ode::{dopri5, euler, SolverStats, MIN_STEP};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pack, Backbone, PackItem};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::ParamSet;
use crate::resample::upsample;
use crate::schedule::StageSchedule;

/// One velocity query: current state, global time and class (`None` is the null class).
#[derive(Clone, Copy, Debug)]
pub struct VelocityRequest<'a> {
    pub image: &'a Image,
    pub t: f64,
    pub class: Option<usize>,
}

/// Anything that predicts velocities for a batch of states.
pub trait VelocityModel {
    fn channels(&self) -> usize;
    fn velocities(&self, requests: &[VelocityRequest<'_>]) -> Result<Vec<Image>>;
}

/// The trained network; a batch of requests becomes one packed forward pass.
pub struct NetworkVelocity<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a ParamSet,
}

impl VelocityModel for NetworkVelocity<'_> {
    fn channels(&self) -> usize {
        self.backbone.config().channels
    }

    fn velocities(&self, requests: &[VelocityRequest<'_>]) -> Result<Vec<Image>> {
        let items: Vec<PackItem> = requests
            .iter()
            .map(|r| PackItem {
                image: r.image,
                t: r.t,
                class: r.class,
            })
            .collect();
        let batch = pack(&items, self.backbone.config().patch_size)?;
        self.backbone.predict(self.params, &batch)
    }
}

/// Wraps a closure `(x, t, class) -> v` as a model, one request at a time.
pub struct FnVelocity<F> {
    pub channels: usize,
    pub f: F,
}

impl<F> VelocityModel for FnVelocity<F>
where
    F: Fn(&Image, f64, Option<usize>) -> Result<Image>,
{
    fn channels(&self) -> usize {
        self.channels
    }

    fn velocities(&self, requests: &[VelocityRequest<'_>]) -> Result<Vec<Image>> {
        requests.iter().map(|r| (self.f)(r.image, r.t, r.class)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Dopri5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps_per_stage: usize,
    pub solver: Solver,
    pub atol: f64,
    pub cfg_max: f64,
    /// Guidance fraction per stage in denoising order; the anchor curve when absent.
    pub cfg_fractions: Option<Vec<f64>>,
    /// Attenuation of carried noise at stage transitions.
    pub renoise_lambda: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps_per_stage: 30,
            solver: Solver::Euler,
            atol: 1e-6,
            cfg_max: 2.4,
            cfg_fractions: None,
            renoise_lambda: 0.5,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, sched: &StageSchedule) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps_per_stage == 0 {
            return bad("steps_per_stage must be at least 1".into());
        }
        if !(self.atol > 0.0 && self.atol.is_finite()) {
            return bad(format!("atol must be positive, got {}", self.atol));
        }
        if !(self.cfg_max >= 1.0 && self.cfg_max.is_finite()) {
            return bad(format!("cfg_max must be >= 1, got {}", self.cfg_max));
        }
        if !(0.0..=1.0).contains(&self.renoise_lambda) {
            return bad(format!("renoise_lambda must be in [0, 1], got {}", self.renoise_lambda));
        }
        if let Some(f) = &self.cfg_fractions {
            if f.len() != sched.stages() {
                return bad(format!("cfg_fractions has {} entries for {} stages", f.len(), sched.stages()));
            }
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) || f.windows(2).any(|p| p[0] > p[1]) {
                return bad(format!("cfg_fractions must be nondecreasing within [0, 1], got {f:?}"));
            }
            if f[f.len() - 1] != 1.0 || (f.len() > 1 && f[0] != 0.0) {
                return bad(format!("cfg_fractions must start at 0 and end at 1, got {f:?}"));
            }
        }
        Ok(())
    }

    /// Guidance weight for stage `s`.
    pub fn weight(&self, s: usize, sched: &StageSchedule) -> Result<f64> {
        match &self.cfg_fractions {
            None => stage_cfg_weight(s, sched, self.cfg_max),
            Some(f) => {
                let i = sched
                    .stages()
                    .checked_sub(1 + s)
                    .ok_or_else(|| Error::Schedule(format!("stage {s} out of range")))?;
                Ok(1.0 + f[i] * (self.cfg_max - 1.0))
            }
        }
    }
}

/// Guided velocity at stage-local time `tau`. Weight 1 (or no class) needs only the conditional pass.
pub fn guided_velocity(
    model: &dyn VelocityModel,
    x: &Image,
    s: usize,
    tau: f64,
    sched: &StageSchedule,
    class: Option<usize>,
    w: f64,
) -> Result<Image> {
    let t = sched.global_time(s, tau)?;
    let cond = VelocityRequest { image: x, t, class };
    if w == 1.0 || class.is_none() {
        return single(model.velocities(&[cond])?);
    }
    let uncond = VelocityRequest { class: None, ..cond };
    let mut v = model.velocities(&[cond, uncond])?;
    if v.len() != 2 {
        return Err(Error::invalid(format!("velocity model returned {} outputs for 2 requests", v.len())));
    }
    let vu = v.pop().expect("two outputs");
    cfg_velocity(&v[0], &vu, w)
}

fn single(mut v: Vec<Image>) -> Result<Image> {
    match v.len() {
        1 => Ok(v.pop().expect("one output")),
        n => Err(Error::invalid(format!("velocity model returned {n} outputs for 1 request"))),
    }
}

fn check_stage_input(model: &dyn VelocityModel, x: &Image, s: usize, sched: &StageSchedule) -> Result<()> {
    let r = sched.resolution(s)?;
    if x.dims() != (model.channels(), r, r) {
        return Err(Error::invalid(format!(
            "stage {s} expects state ({}, {r}, {r}), got {:?}",
            model.channels(),
            x.dims()
        )));
    }
    Ok(())
}

pub fn euler_stage(
    model: &dyn VelocityModel,
    x: &Image,
    s: usize,
    sched: &StageSchedule,
    n_steps: usize,
    class: Option<usize>,
    w: f64,
) -> Result<Image> {
    check_stage_input(model, x, s, sched)?;
    let f = |tau: f64, x: &Image| guided_velocity(model, x, s, tau, sched, class, w);
    euler(f, x, n_steps)
        .map(|(x, _)| x)
        .map_err(|e| stage_err(e, s))
}

pub fn dopri5_stage(
    model: &dyn VelocityModel,
    x: &Image,
    s: usize,
    sched: &StageSchedule,
    atol: f64,
    class: Option<usize>,
    w: f64,
) -> Result<Image> {
    check_stage_input(model, x, s, sched)?;
    let f = |tau: f64, x: &Image| guided_velocity(model, x, s, tau, sched, class, w);
    dopri5(f, x, atol)
        .map(|(x, _)| x)
        .map_err(|e| stage_err(e, s))
}

fn stage_err(e: Error, s: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("stage {s}: {m}")),
        other => other,
    }
}

/// Fresh-noise scale that tops the damped carried noise back up to the next stage's level.
pub fn renoise_gamma(s_from: usize, sched: &StageSchedule, lambda: f64) -> Result<f64> {
    if s_from == 0 || s_from >= sched.stages() {
        return Err(Error::Schedule(format!(
            "renoise: no transition out of stage {s_from} with {} stages",
            sched.stages()
        )));
    }
    let (_, t_e) = sched.interval(s_from)?;
    let (t_s, _) = sched.interval(s_from - 1)?;
    let var = (1.0 - t_s).powi(2) - lambda * lambda * (1.0 - t_e).powi(2);
    if var < 0.0 {
        return Err(Error::invalid(format!(
            "renoise: lambda {lambda} needs negative fresh-noise variance {var}"
        )));
    }
    Ok(var.sqrt())
}

/// `λ·Up(x_end, 2) + γ·ε` at the next, higher-resolution stage.
pub fn renoise_transition<R: Rng + ?Sized>(
    x_end: &Image,
    s_from: usize,
    sched: &StageSchedule,
    lambda: f64,
    rng: &mut R,
) -> Result<Image> {
    let gamma = renoise_gamma(s_from, sched, lambda)?;
    let r = sched.resolution(s_from)?;
    if x_end.height() != r || x_end.width() != r {
        return Err(Error::invalid(format!(
            "renoise: stage {s_from} state should be {r}x{r}, got {}x{}",
            x_end.height(),
            x_end.width()
        )));
    }
    let up = upsample(x_end, 2)?;
    let noise = Image::randn(up.channels(), up.height(), up.width(), rng);
    up.lincomb(lambda, &noise, gamma)
}

/// One image: Gaussian noise at the lowest resolution carried through every stage.
pub fn generate(
    model: &dyn VelocityModel,
    class: Option<usize>,
    sched: &StageSchedule,
    cfg: &SampleConfig,
) -> Result<Image> {
    cfg.validate(sched)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let low = sched.lowest_stage();
    let r = sched.resolution(low)?;
    let mut x = Image::randn(model.channels(), r, r, &mut rng);
    for s in (0..=low).rev() {
        let w = cfg.weight(s, sched)?;
        x = match cfg.solver {
            Solver::Euler => euler_stage(model, &x, s, sched, cfg.steps_per_stage, class, w)?,
            Solver::Dopri5 => dopri5_stage(model, &x, s, sched, cfg.atol, class, w)?,
        };
        if s > 0 {
            x = renoise_transition(&x, s, sched, cfg.renoise_lambda, &mut rng)?;
        }
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}
