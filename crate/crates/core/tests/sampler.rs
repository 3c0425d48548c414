use pixflow::backbone::{Backbone, ModelConfig};
use pixflow::resample::{downsample, upsample};
use pixflow::sampler::{
    generate, guided_velocity, renoise_gamma, renoise_transition, FnVelocity, NetworkVelocity, SampleConfig, Solver,
    VelocityModel, VelocityRequest,
};
use pixflow::schedule::StageSchedule;
use pixflow::{Image, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exact stage velocity for a single known clean image: recover the noise
/// from the state, then return end − start of that noise's path.
fn oracle(target: &Image, sched: &StageSchedule) -> impl Fn(&Image, f64, Option<usize>) -> Result<Image> {
    let target = target.clone();
    let sched = sched.clone();
    move |x: &Image, t: f64, _| {
        let s = (0..sched.stages())
            .find(|&s| sched.resolution(s).unwrap() == x.height())
            .expect("state resolution matches a stage");
        let (t0, t1) = sched.interval(s)?;
        let tau = (t - t0) / (t1 - t0);
        let b = downsample(&target, 1 << s)?;
        let a = upsample(&downsample(&target, 1 << (s + 1))?, 2)?;
        let clean = b.lincomb(tau * t1, &a, (1.0 - tau) * t0)?;
        let sigma = tau * (1.0 - t1) + (1.0 - tau) * (1.0 - t0);
        let eps = x.lincomb(1.0 / sigma, &clean, -1.0 / sigma)?;
        let drift = b.lincomb(t1, &a, -t0)?;
        drift.lincomb(1.0, &eps, t0 - t1)
    }
}

#[test]
fn oracle_velocity_reproduces_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for stages in [1, 2, 3] {
        let sched = StageSchedule::new(stages, 16, 2).unwrap();
        let target = Image::randn(3, 16, 16, &mut rng).map(|v| v.clamp(-1.0, 1.0) * 0.9);
        let model = FnVelocity { channels: 3, f: oracle(&target, &sched) };
        let cfg = SampleConfig { steps_per_stage: 30, cfg_max: 1.0, seed: stages as u64, ..SampleConfig::default() };
        let out = generate(&model, Some(0), &sched, &cfg).unwrap();
        assert!(out.max_abs_diff(&target) < 1e-3, "S={stages}: {}", out.max_abs_diff(&target));
    }
}

#[test]
fn single_stage_generation_is_plain_flow_sampling() {
    let sched = StageSchedule::new(1, 8, 2).unwrap();
    let field = |x: &Image, t: f64, _: Option<usize>| Ok(x.map(|v| 0.3 * t - 0.2 * v));
    let model = FnVelocity { channels: 3, f: field };
    let cfg = SampleConfig { steps_per_stage: 10, seed: 4, ..SampleConfig::default() };
    let out = generate(&model, Some(1), &sched, &cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x = Image::randn(3, 8, 8, &mut rng);
    for i in 0..10 {
        let t = i as f64 / 10.0;
        let v = field(&x, t, None).unwrap();
        x = x.lincomb(1.0, &v, 0.1).unwrap();
    }
    assert_eq!(out, x.map(|v| v.clamp(-1.0, 1.0)));
}

fn network() -> (Backbone, pixflow::numerics::ParamSet) {
    let model = Backbone::new(ModelConfig {
        hidden_dim: 32,
        depth: 2,
        heads: 2,
        patch_size: 2,
        channels: 3,
        num_classes: 3,
        max_resolution: 16,
        mlp_ratio: 2,
        freq_dim: 16,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params = model.init_params(&mut rng);
    model.perturb(&mut params, 0.1, &mut rng);
    (model, params)
}

#[test]
fn batched_guidance_matches_separate_passes() {
    let (backbone, params) = network();
    let model = NetworkVelocity { backbone: &backbone, params: &params };
    let sched = StageSchedule::new(2, 16, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Image::randn(3, 16, 16, &mut rng);
    let w = 2.4;
    let guided = guided_velocity(&model, &x, 0, 0.25, &sched, Some(2), w).unwrap();
    let t = sched.global_time(0, 0.25).unwrap();
    let vc = model.velocities(&[VelocityRequest { image: &x, t, class: Some(2) }]).unwrap();
    let vu = model.velocities(&[VelocityRequest { image: &x, t, class: None }]).unwrap();
    let manual = vu[0].lincomb(1.0 - w, &vc[0], w).unwrap();
    assert!(guided.max_abs_diff(&manual) < 1e-10);
}

#[test]
fn network_generation_is_deterministic_for_both_solvers() {
    let (backbone, params) = network();
    let model = NetworkVelocity { backbone: &backbone, params: &params };
    let sched = StageSchedule::new(2, 16, 2).unwrap();
    for solver in [Solver::Euler, Solver::Dopri5] {
        let cfg = SampleConfig { steps_per_stage: 4, solver, atol: 1e-4, seed: 3, ..SampleConfig::default() };
        let a = generate(&model, Some(1), &sched, &cfg).unwrap();
        let b = generate(&model, Some(1), &sched, &cfg).unwrap();
        assert_eq!(a.dims(), (3, 16, 16));
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn renoise_residual_has_predicted_variance() {
    let sched = StageSchedule::new(4, 64, 2).unwrap();
    let lambda = 0.5;
    let gamma = renoise_gamma(1, &sched, lambda).unwrap();
    assert!((gamma - 0.2165063509461097).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x_end = Image::randn(3, 32, 32, &mut rng);
    let up = upsample(&x_end, 2).unwrap();
    let mut sq = 0.0;
    let mut n = 0usize;
    while n < 100_000 {
        let next = renoise_transition(&x_end, 1, &sched, lambda, &mut rng).unwrap();
        for (a, b) in next.values().iter().zip(up.values()) {
            sq += (a - lambda * b).powi(2);
            n += 1;
        }
    }
    let var = sq / n as f64;
    assert!((var - gamma * gamma).abs() < 0.02 * gamma * gamma, "{var} vs {}", gamma * gamma);
}

#[test]
fn pure_noise_limit_of_renoise() {
    let sched = StageSchedule::new(4, 64, 2).unwrap();
    assert_eq!(renoise_gamma(1, &sched, 0.0).unwrap(), 0.25);
    assert_eq!(renoise_gamma(3, &sched, 1.0).unwrap(), 0.0);
}
