//! Self-test suite behind the `check` subcommand.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::backbone::{apply_rope_2d, pack, Backbone, ModelConfig, PackItem, PackedBatch};
use crate::error::Result;
use crate::flow::{make_endpoints, velocity_target};
use crate::image::Image;
use crate::numerics::{relative_error, tape_grads, tape_numeric_grads, ParamSet, Tape, Tensor, Var};
use crate::resample::{downsample, upsample};
use crate::sampler::{dopri5, euler, renoise_gamma, renoise_transition, stage_cfg_weight};
use crate::schedule::StageSchedule;

const GRAD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

/// Knobs for exercising the harness itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOptions {
    /// Flip the sign of every analytic gradient before comparing.
    pub negate_gradient: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn(&RunConfig, &CheckOptions, &mut ChaCha8Rng) -> Result<(bool, String)>;

pub const CHECKS: [(&str, CheckFn); 12] = [
    ("gradient.ops", gradient_ops),
    ("gradient.backbone", gradient_backbone),
    ("model.zero_init_output", zero_init_output),
    ("packing.equivalence", packing_equivalence),
    ("rope.relative_shift", rope_relative_shift),
    ("solver.euler_constant", euler_constant),
    ("solver.dopri5_exponential", dopri5_exponential),
    ("solver.dopri5_polynomial", dopri5_polynomial),
    ("renoise.variance", renoise_variance),
    ("resample.identities", resample_identities),
    ("schedule.tiling_and_roundtrip", schedule_algebra),
    ("flow_and_cfg.closed_forms", flow_and_cfg),
];

pub fn run_checks(cfg: &RunConfig, opts: &CheckOptions) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let (passed, detail) = match f(cfg, opts, &mut rng) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome { name, passed, detail }
        })
        .collect()
}

pub fn format_report(outcomes: &[CheckOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{tag} {:<32} {}\n", o.name, o.detail));
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    out.push_str(&format!("{} checks, {failed} failed\n", outcomes.len()));
    out
}

/// Small model sharing the run's patch size, channels and classes.
fn check_model(cfg: &RunConfig) -> Result<Backbone> {
    let p = cfg.model.patch_size;
    Backbone::new(ModelConfig {
        hidden_dim: 32,
        depth: 2,
        heads: 2,
        patch_size: p,
        channels: cfg.model.channels,
        num_classes: cfg.model.num_classes,
        max_resolution: 4 * p,
        mlp_ratio: 2,
        freq_dim: 16,
    })
}

fn perturbed_params(model: &Backbone, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut params = model.init_params(rng);
    model.perturb(&mut params, 0.2, rng);
    params
}

fn grad_verdict(analytic: &[f64], numeric: &[f64], negate: bool) -> (bool, f64) {
    let a: Vec<f64> = analytic.iter().map(|g| if negate { -g } else { *g }).collect();
    let err = relative_error(&a, numeric);
    (err < GRAD_TOL, err)
}

fn gradient_ops(_: &RunConfig, opts: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let lens: Rc<[usize]> = Rc::from(vec![2, 3]);
    let l2 = lens.clone();
    let l3 = lens.clone();
    let l4 = lens.clone();
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let y = t.square(y);
            Ok(t.sum(y))
        })),
        ("softmax", vec![vec![2, 5], vec![2, 5]], Box::new(|t, v| {
            let s = t.softmax(v[0]);
            let y = t.mul(s, v[1])?;
            Ok(t.sum(y))
        })),
        ("layer_norm", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| {
            let s = t.layer_norm(v[0], 1e-6)?;
            let y = t.mul(s, v[1])?;
            Ok(t.sum(y))
        })),
        ("pointwise", vec![vec![2, 3]], Box::new(|t, v| {
            let a = t.gelu(v[0]);
            let b = t.silu(v[0]);
            let c = t.sin(v[0]);
            let d = t.cos(a);
            let e = t.mul(b, c)?;
            let f = t.add(d, e)?;
            t.mean(f)
        })),
        ("modulate_gate", vec![vec![5, 4], vec![2, 4], vec![2, 4], vec![5, 4], vec![2, 4]], Box::new(move |t, v| {
            let m = t.modulate(v[0], v[1], v[2], lens.clone())?;
            let g = t.gated_add(m, v[3], v[4], lens.clone())?;
            let g = t.square(g);
            Ok(t.sum(g))
        })),
        ("segment_attention", vec![vec![5, 8], vec![5, 8], vec![5, 8], vec![5, 8]], Box::new(move |t, v| {
            let a = t.segment_attention(v[0], v[1], v[2], l2.clone(), 2)?;
            let y = t.mul(a, v[3])?;
            Ok(t.sum(y))
        })),
        ("segment_mse", vec![vec![5, 3], vec![5, 3]], Box::new(move |t, v| t.segment_mse(v[0], v[1], l3.clone()))),
        ("expand_segments", vec![vec![2, 3], vec![5, 3]], Box::new(move |t, v| {
            let e = t.expand_segments(v[0], l4.clone())?;
            let y = t.mul(e, v[1])?;
            Ok(t.sum(y))
        })),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    let mut all = true;
    for (name, shapes, build) in cases {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(s.clone(), -2.0, 2.0, rng)).collect();
        let a = tape_grads(&inputs, &build)?;
        let n = tape_numeric_grads(&inputs, &build, FD_STEP)?;
        let flat = |ts: &[Tensor]| ts.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>();
        let (ok, err) = grad_verdict(&flat(&a), &flat(&n), opts.negate_gradient);
        all &= ok;
        if err >= worst.0 {
            worst = (err, name);
        }
    }
    Ok((all, format!("worst relative error {:.2e} ({})", worst.0, worst.1)))
}

fn two_sequence_batch(model: &Backbone, rng: &mut ChaCha8Rng) -> Result<(PackedBatch, Tensor)> {
    let c = model.config();
    let p = c.patch_size;
    let a = Image::randn(c.channels, 4 * p, 4 * p, rng);
    let b = Image::randn(c.channels, 2 * p, 2 * p, rng);
    let items = [
        PackItem { image: &a, t: 0.3, class: Some(0) },
        PackItem { image: &b, t: 0.8, class: None },
    ];
    let batch = pack(&items, p)?;
    let ta = Image::randn(c.channels, 4 * p, 4 * p, rng);
    let tb = Image::randn(c.channels, 2 * p, 2 * p, rng);
    let targets = batch.pack_images(&[&ta, &tb])?;
    Ok((batch, targets))
}

fn gradient_backbone(cfg: &RunConfig, opts: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    const SAMPLES: usize = 200;
    let model = check_model(cfg)?;
    let params = perturbed_params(&model, rng);
    let (batch, targets) = two_sequence_batch(&model, rng)?;
    let (_, grads) = model.loss_and_grads(&params, &batch, &targets)?;

    let mut analytic = Vec::with_capacity(SAMPLES);
    let mut numeric = Vec::with_capacity(SAMPLES);
    let mut probe = params.clone();
    for _ in 0..SAMPLES {
        let i = rng.random_range(0..params.len());
        let j = rng.random_range(0..params.get(i).numel());
        let orig = params.get(i).data()[j];
        probe.tensors_mut()[i].data_mut()[j] = orig + FD_STEP;
        let fp = model.loss(&probe, &batch, &targets)?;
        probe.tensors_mut()[i].data_mut()[j] = orig - FD_STEP;
        let fm = model.loss(&probe, &batch, &targets)?;
        probe.tensors_mut()[i].data_mut()[j] = orig;
        analytic.push(grads[i][j]);
        numeric.push((fp - fm) / (2.0 * FD_STEP));
    }
    let (ok, err) = grad_verdict(&analytic, &numeric, opts.negate_gradient);
    Ok((ok, format!("relative error {err:.2e} over {SAMPLES} sampled coordinates")))
}

fn zero_init_output(cfg: &RunConfig, _: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let model = check_model(cfg)?;
    let params = model.init_params(rng);
    let (batch, _) = two_sequence_batch(&model, rng)?;
    let out = model.predict(&params, &batch)?;
    let max = out.iter().flat_map(|i| i.values()).fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((max == 0.0, format!("max |output| {max:e}")))
}

fn packing_equivalence(cfg: &RunConfig, _: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let model = check_model(cfg)?;
    let params = perturbed_params(&model, rng);
    let c = model.config();
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let n = rng.random_range(2..=4);
        let imgs: Vec<Image> = (0..n)
            .map(|_| {
                let r = c.patch_size * rng.random_range(1..=4);
                Image::randn(c.channels, r, r, rng)
            })
            .collect();
        let items: Vec<PackItem> = imgs
            .iter()
            .map(|img| PackItem {
                image: img,
                t: rng.random(),
                class: if rng.random_bool(0.5) { Some(rng.random_range(0..c.num_classes)) } else { None },
            })
            .collect();
        let packed = model.predict(&params, &pack(&items, c.patch_size)?)?;
        for (item, out) in items.iter().zip(&packed) {
            let alone = model.predict(&params, &pack(std::slice::from_ref(item), c.patch_size)?)?;
            worst = worst.max(out.max_abs_diff(&alone[0]));
        }
    }
    Ok((worst <= 1e-10, format!("max deviation {worst:.2e}")))
}

fn rope_relative_shift(_: &RunConfig, _: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let d = 16;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut pos = || (rng.random_range(0..32), rng.random_range(0..32));
        let (pq, pk, delta) = (pos(), pos(), pos());
        let dot = |a: (usize, usize), b: (usize, usize)| -> Result<f64> {
            let rq = apply_rope_2d(&q, &[a], d)?;
            let rk = apply_rope_2d(&k, &[b], d)?;
            Ok(rq.iter().zip(&rk).map(|(x, y)| x * y).sum())
        };
        let base = dot(pq, pk)?;
        let shifted = dot((pq.0 + delta.0, pq.1 + delta.1), (pk.0 + delta.0, pk.1 + delta.1))?;
        worst = worst.max((base - shifted).abs());
    }
    Ok((worst <= 1e-10, format!("max deviation {worst:.2e}")))
}

fn euler_constant(_: &RunConfig, _: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x0 = Image::randn(1, 4, 4, rng);
    let c = Image::randn(1, 4, 4, rng);
    let mut worst = 0.0f64;
    for n in [1, 7, 30] {
        let (x, _) = euler(|_, _| Ok(c.clone()), &x0, n)?;
        let exact = x0.lincomb(1.0, &c, 1.0)?;
        worst = worst.max(x.max_abs_diff(&exact));
    }
    Ok((worst <= 1e-12, format!("max error {worst:.2e}")))
}

fn dopri5_exponential(_: &RunConfig, _: &CheckOptions, _: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (x, st) = dopri5(|_, x| Ok(x.clone()), &Image::filled(1, 1, 1, 1.0), 1e-6)?;
    let err = (x.values()[0] - 1f64.exp()).abs();
    Ok((err <= 1e-5, format!("endpoint error {err:.2e} in {} steps", st.accepted)))
}

fn dopri5_polynomial(_: &RunConfig, _: &CheckOptions, _: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (x, _) = dopri5(|t, _| Ok(Image::filled(1, 1, 1, 3.0 * t * t)), &Image::filled(1, 1, 1, 0.0), 1e-6)?;
    let err = (x.values()[0] - 1.0).abs();
    Ok((err <= 4.0 * f64::EPSILON, format!("endpoint error {err:.2e}")))
}

fn renoise_variance(_: &RunConfig, _: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    // Four stages put the first transition at t = 0.75.
    let sched = StageSchedule::new(4, 64, 2)?;
    let lambda = 0.5;
    let gamma = renoise_gamma(1, &sched, lambda)?;
    let x_end = Image::randn(3, 32, 32, rng);
    let up = upsample(&x_end, 2)?;
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    while n < 100_000 {
        let next = renoise_transition(&x_end, 1, &sched, lambda, rng)?;
        for (a, b) in next.values().iter().zip(up.values()) {
            let r = a - lambda * b;
            sum += r;
            sq += r * r;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let rel = (var - gamma * gamma).abs() / (gamma * gamma);
    Ok((rel < 0.02, format!("variance {var:.5} vs {:.5} ({:.2}% off, n={n})", gamma * gamma, 100.0 * rel)))
}

fn resample_identities(_: &RunConfig, _: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x = Image::randn(3, 8, 8, rng);
    let mut worst = 0.0f64;
    for f in [1, 2, 4, 8] {
        worst = worst.max(downsample(&upsample(&x, f)?, f)?.max_abs_diff(&x));
        worst = worst.max((downsample(&x, f)?.mean() - x.mean()).abs());
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.2e}")))
}

fn schedule_algebra(cfg: &RunConfig, _: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let sched = cfg.stage_schedule()?;
    let s_count = sched.stages();
    let mut ok = sched.interval(s_count - 1)?.0 == 0.0 && sched.interval(0)?.1 == 1.0;
    for s in 1..s_count {
        ok &= sched.interval(s)?.1 == sched.interval(s - 1)?.0;
    }
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let t: f64 = rng.random();
        let (s, tau) = sched.locate(t)?;
        worst = worst.max((sched.global_time(s, tau)? - t).abs());
    }
    ok &= worst <= 1e-15;
    Ok((ok, format!("{s_count} stages tile [0, 1]; round-trip error {worst:.2e}")))
}

fn flow_and_cfg(_: &RunConfig, _: &CheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let single = StageSchedule::new(1, 8, 2)?;
    let x1 = Image::randn(3, 8, 8, rng);
    let eps = Image::randn(3, 8, 8, rng);
    let (start, end) = make_endpoints(&x1, &eps, 0, &single)?;
    let v = velocity_target(&start, &end)?;
    let mut ok = start == eps && end == x1 && v == x1.lincomb(1.0, &eps, -1.0)?;

    let four = StageSchedule::new(4, 64, 2)?;
    let expected = [1.0, 1.0 + 1.4 / 6.0, 1.0 + 1.4 * 2.0 / 3.0, 2.4];
    for (i, s) in (0..4).rev().enumerate() {
        ok &= (stage_cfg_weight(s, &four, 2.4)? - expected[i]).abs() <= 1e-12;
    }
    Ok((ok, "single-stage endpoints and four-stage guidance weights".into()))
}
