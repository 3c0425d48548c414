//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs all of them; criterion numbers given
//! as arguments (`cargo test --test acceptance -- 3 7`) select a subset.

use std::time::Instant;

use pixflow::backbone::{apply_rope_2d, pack, Backbone, ModelConfig, PackItem};
use pixflow::data::{
    gen_shapes_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_ppm, Dataset,
};
use pixflow::flow::{interpolate, make_endpoints, velocity_target};
use pixflow::numerics::ParamSet;
use pixflow::resample::upsample;
use pixflow::sampler::{dopri5, euler, generate, renoise_transition, stage_cfg_weight, NetworkVelocity, SampleConfig};
use pixflow::schedule::StageSchedule;
use pixflow::train::{TrainConfig, Trainer};
use pixflow::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn small_model(num_classes: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: 32,
        depth: 2,
        heads: 2,
        patch_size: 2,
        channels: 3,
        num_classes,
        max_resolution: 16,
        mlp_ratio: 4,
        freq_dim: 32,
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// Full-backbone gradients against central differences over every parameter.
#[allow(clippy::needless_range_loop)]
fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let model = Backbone::new(small_model(4)).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = model.init_params(&mut rng);
    // Move off the zero initialisation so every path carries gradient.
    model.perturb(&mut params, 0.2, &mut rng);
    let a = Image::randn(3, 8, 8, &mut rng);
    let b = Image::randn(3, 4, 4, &mut rng);
    let batch = pack(
        &[PackItem { image: &a, t: 0.7, class: Some(2) }, PackItem { image: &b, t: 0.2, class: None }],
        2,
    )
    .map_err(e)?;
    let ta = Image::randn(3, 8, 8, &mut rng);
    let tb = Image::randn(3, 4, 4, &mut rng);
    let targets = batch.pack_images(&[&ta, &tb]).map_err(e)?;

    let (_, grads) = model.loss_and_grads(&params, &batch, &targets).map_err(e)?;
    let h = 1e-5;
    let mut probe: ParamSet = params.clone();
    let (mut diff, mut na, mut nn, mut count) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..params.len() {
        for j in 0..params.get(i).numel() {
            let orig = params.get(i).data()[j];
            probe.tensors_mut()[i].data_mut()[j] = orig + h;
            let fp = model.loss(&probe, &batch, &targets).map_err(e)?;
            probe.tensors_mut()[i].data_mut()[j] = orig - h;
            let fm = model.loss(&probe, &batch, &targets).map_err(e)?;
            probe.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[i][j];
            diff += (analytic - numeric).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
            count += 1;
        }
    }
    let rel = diff.sqrt() / na.sqrt().max(nn.sqrt());
    let secs = start.elapsed().as_secs_f64();
    Ok((
        rel < 1e-6 && secs < 60.0,
        format!("relative error {rel:.2e} over {count} parameters in {secs:.1} s (limits 1e-6, 60 s)"),
    ))
}

/// Single-stage endpoints are (noise, data) and the target is data minus noise, exactly.
fn degenerate_case() -> Outcome {
    let sched = StageSchedule::new(1, 16, 2).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    for _ in 0..20 {
        let x1 = Image::randn(3, 16, 16, &mut rng);
        let eps = Image::randn(3, 16, 16, &mut rng);
        let (start, end) = make_endpoints(&x1, &eps, 0, &sched).map_err(e)?;
        let v = velocity_target(&start, &end).map_err(e)?;
        let expected: Vec<f64> = x1.values().iter().zip(eps.values()).map(|(a, b)| a - b).collect();
        ok &= start == eps && end == x1 && v.values() == expected.as_slice();
        let tau: f64 = rng.random();
        let xt = interpolate(&start, &end, tau).map_err(e)?;
        let flat: Vec<f64> = x1.values().iter().zip(eps.values()).map(|(a, b)| tau * a + (1.0 - tau) * b).collect();
        ok &= xt.values() == flat.as_slice();
    }
    Ok((ok, "endpoints, velocity and interpolant bit-exact over 20 draws".into()))
}

fn schedule_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tiled = true;
    for stages in 1..=6 {
        let sched = StageSchedule::new(stages, 256, 2).map_err(e)?;
        tiled &= sched.interval(stages - 1).map_err(e)?.0 == 0.0 && sched.interval(0).map_err(e)?.1 == 1.0;
        for s in 1..stages {
            tiled &= sched.interval(s).map_err(e)?.1 == sched.interval(s - 1).map_err(e)?.0;
        }
    }
    let sched = StageSchedule::new(4, 64, 2).map_err(e)?;
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let t: f64 = rng.random();
        let (s, tau) = sched.locate(t).map_err(e)?;
        worst = worst.max((sched.global_time(s, tau).map_err(e)? - t).abs());
    }
    let mut hand = true;
    for (stages, t, stage, tau) in [(4, 0.30, 2, 0.2), (2, 0.75, 0, 0.5), (4, 0.0, 3, 0.0), (4, 1.0, 0, 1.0), (3, 0.5, 1, 0.5)] {
        let sched = StageSchedule::new(stages, 64, 2).map_err(e)?;
        let (s, got) = sched.locate(t).map_err(e)?;
        hand &= s == stage && (got - tau).abs() < 1e-15;
    }
    Ok((
        tiled && hand && worst <= 1e-15,
        format!("tiling exact for S=1..6, hand cases match, round-trip error {worst:.1e} over 1e4 draws"),
    ))
}

fn solvers() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = Image::randn(3, 4, 4, &mut rng);
    let c = Image::randn(3, 4, 4, &mut rng);
    let mut euler_err = 0.0f64;
    for n in [1, 2, 5, 30, 100] {
        let (x, _) = euler(|_, _| Ok(c.clone()), &x0, n).map_err(e)?;
        for ((xv, x0v), cv) in x.values().iter().zip(x0.values()).zip(c.values()) {
            euler_err = euler_err.max((xv - (x0v + cv)).abs());
        }
    }
    let one = Image::filled(1, 1, 1, 1.0);
    let (x, _) = dopri5(|_, x| Ok(x.clone()), &one, 1e-6).map_err(e)?;
    let exp_err = (x.values()[0] - std::f64::consts::E).abs();
    let zero = Image::filled(1, 1, 1, 0.0);
    let (x, _) = dopri5(|t, _| Ok(Image::filled(1, 1, 1, 3.0 * t * t)), &zero, 1e-6).map_err(e)?;
    let quad_err = (x.values()[0] - 1.0).abs();
    let secs = start.elapsed().as_secs_f64();
    Ok((
        euler_err <= 1e-12 && exp_err <= 1e-5 && quad_err <= 2.0 * f64::EPSILON && secs < 5.0,
        format!("euler {euler_err:.1e}, dopri5 exp {exp_err:.1e}, quadrature {quad_err:.1e}, {secs:.2} s"),
    ))
}

fn packing() -> Outcome {
    let model = Backbone::new(small_model(5)).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = model.init_params(&mut rng);
    model.perturb(&mut params, 0.2, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.random_range(2..=5);
        let imgs: Vec<Image> = (0..n)
            .map(|_| {
                let r = [2, 4, 8, 16][rng.random_range(0..4)];
                Image::randn(3, r, r, &mut rng)
            })
            .collect();
        let items: Vec<PackItem> = imgs
            .iter()
            .map(|img| PackItem {
                image: img,
                t: rng.random(),
                class: if rng.random_bool(0.2) { None } else { Some(rng.random_range(0..5)) },
            })
            .collect();
        let packed = model.predict(&params, &pack(&items, 2).map_err(e)?).map_err(e)?;
        for (item, out) in items.iter().zip(&packed) {
            let alone = model.predict(&params, &pack(std::slice::from_ref(item), 2).map_err(e)?).map_err(e)?;
            worst = worst.max(out.max_abs_diff(&alone[0]));
        }
    }
    Ok((worst <= 1e-10, format!("max deviation {worst:.1e} over 10 mixed-resolution packs")))
}

fn rope() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 32;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut pos = || (rng.random_range(0..64usize), rng.random_range(0..64usize));
        let (p1, p2, delta) = (pos(), pos(), pos());
        let dot = |a, b| -> Result<f64, String> {
            let rq = apply_rope_2d(&q, &[a], d).map_err(e)?;
            let rk = apply_rope_2d(&k, &[b], d).map_err(e)?;
            Ok(rq.iter().zip(&rk).map(|(x, y)| x * y).sum())
        };
        let base = dot(p1, p2)?;
        let shifted = dot((p1.0 + delta.0, p1.1 + delta.1), (p2.0 + delta.0, p2.1 + delta.1))?;
        worst = worst.max((base - shifted).abs());
    }
    Ok((worst <= 1e-10, format!("max deviation {worst:.1e} over 100 draws")))
}

fn renoise() -> Outcome {
    // Four stages: the stage-1 to stage-0 transition sits at t = 0.75.
    let sched = StageSchedule::new(4, 64, 2).map_err(e)?;
    let (lambda, t) = (0.5, 0.75);
    let gamma2 = (1.0f64 - t).powi(2) - lambda * lambda * (1.0f64 - t).powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x_end = Image::randn(3, 32, 32, &mut rng);
    let up = upsample(&x_end, 2).map_err(e)?;
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    while n < 100_000 {
        let next = renoise_transition(&x_end, 1, &sched, lambda, &mut rng).map_err(e)?;
        for (a, b) in next.values().iter().zip(up.values()) {
            let r = a - lambda * b;
            sum += r;
            sq += r * r;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let rel = (var - gamma2).abs() / gamma2;
    Ok((rel < 0.02, format!("variance {var:.5} vs {gamma2:.5} ({:.2}% off, {n} draws)", 100.0 * rel)))
}

fn cfg_schedule() -> Outcome {
    let sched = StageSchedule::new(4, 64, 2).map_err(e)?;
    let cfg_max = 2.40;
    let expected = [0.0, 1.0 / 6.0, 2.0 / 3.0, 1.0].map(|f| 1.0 + f * (cfg_max - 1.0));
    let got: Vec<f64> = (0..4).rev().map(|s| stage_cfg_weight(s, &sched, cfg_max)).collect::<Result<_, _>>().map_err(e)?;
    let worst = got.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((worst <= 1e-12, format!("weights {got:.4?} in denoising order, max deviation {worst:.1e}")))
}

/// Mean over pixels of the channel-wise L2 distance.
fn pixel_l2(a: &Image, b: &Image) -> f64 {
    let (c, h, w) = a.dims();
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            acc += (0..c).map(|ch| (a.at(ch, y, x) - b.at(ch, y, x)).powi(2)).sum::<f64>().sqrt();
        }
    }
    acc / (h * w) as f64
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let data: Dataset = gen_shapes_dataset(8, 32, 8, 0).map_err(e)?;
    let model = ModelConfig::default();
    let sched = StageSchedule::new(2, 32, model.patch_size).map_err(e)?;
    let train = TrainConfig::default();
    let mut tr = Trainer::new(model, sched.clone(), train).map_err(e)?;
    let mut losses = Vec::with_capacity(train.total_steps as usize);
    for _ in 0..train.total_steps {
        losses.push(tr.train_step(&data).map_err(e)?.loss);
    }
    let first = losses[..100].iter().sum::<f64>() / 100.0;
    let last = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    let train_secs = start.elapsed().as_secs_f64();

    let velocity = NetworkVelocity { backbone: tr.backbone(), params: tr.ema() };
    let mut dists = Vec::new();
    for (i, &label) in data.labels().iter().enumerate() {
        let cfg = SampleConfig { seed: i as u64, ..SampleConfig::default() };
        let img = generate(&velocity, Some(label), &sched, &cfg).map_err(e)?;
        let nearest = data.images().iter().map(|x| pixel_l2(&img, x)).fold(f64::INFINITY, f64::min);
        dists.push(nearest);
    }
    let dist = dists.iter().sum::<f64>() / dists.len() as f64;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    Ok((
        last < 0.05 && dist < 0.15,
        format!(
            "loss (mean of last 100 steps) {last:.4} < 0.05, sample distance {dist:.4} < 0.15; \
             first-100 mean {first:.4} ({:.1}x drop); {:.1} min total, {:.2} s/step",
            first / last,
            minutes,
            train_secs / train.total_steps as f64
        ),
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let model = ModelConfig { hidden_dim: 16, depth: 1, num_classes: 4, freq_dim: 8, mlp_ratio: 2, max_resolution: 16, ..small_model(4) };
    let sched = StageSchedule::new(2, 16, 2).map_err(e)?;
    let cfg = TrainConfig { batch_size: 4, lr: 1e-3, weight_decay: 0.01, seed: 10, ..TrainConfig::default() };
    let data = gen_shapes_dataset(6, 16, 4, 10).map_err(e)?;

    let mut straight = Trainer::new(model, sched.clone(), cfg).map_err(e)?;
    let mut a = Vec::new();
    for _ in 0..6 {
        a.push(straight.train_step(&data).map_err(e)?.loss.to_bits());
    }
    let mut part = Trainer::new(model, sched, cfg).map_err(e)?;
    let mut b = Vec::new();
    for _ in 0..3 {
        b.push(part.train_step(&data).map_err(e)?.loss.to_bits());
    }
    let ck_path = dir.path().join("mid.pxfc");
    save_checkpoint(&part.checkpoint(), &ck_path).map_err(e)?;
    let mut resumed = Trainer::resume(load_checkpoint(&ck_path).map_err(e)?, cfg).map_err(e)?;
    for _ in 0..3 {
        b.push(resumed.train_step(&data).map_err(e)?.loss.to_bits());
    }
    let bits = |p: &ParamSet| p.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    let (sc, rc) = (straight.checkpoint(), resumed.checkpoint());
    let resume_ok = a == b
        && bits(&sc.params) == bits(&rc.params)
        && bits(&sc.ema) == bits(&rc.ema)
        && bits(sc.optimizer.first_moments()) == bits(rc.optimizer.first_moments())
        && bits(sc.optimizer.second_moments()) == bits(rc.optimizer.second_moments())
        && sc.rng == rc.rng;

    let ck_ok = {
        let path = dir.path().join("end.pxfc");
        save_checkpoint(&sc, &path).map_err(e)?;
        let back = load_checkpoint(&path).map_err(e)?;
        back == sc && bits(&back.params) == bits(&sc.params)
    };
    let ds_ok = {
        let path = dir.path().join("d.pxfd");
        save_dataset(&data, &path).map_err(e)?;
        let back = load_dataset(&path).map_err(e)?;
        back == data
            && back.images().iter().zip(data.images()).all(|(x, y)| {
                x.values().iter().zip(y.values()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    };
    let ppm_ok = {
        let (p1, p2) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
        write_ppm(&data.images()[0], &p1).map_err(e)?;
        write_ppm(&data.images()[0], &p2).map_err(e)?;
        std::fs::read(&p1).map_err(e)? == std::fs::read(&p2).map_err(e)?
    };
    Ok((
        resume_ok && ck_ok && ds_ok && ppm_ok,
        format!("resume bit-identical: {resume_ok}; checkpoint: {ck_ok}; dataset: {ds_ok}; ppm: {ppm_ok}"),
    ))
}

const CRITERIA: [Criterion; 10] = [
    ("gradient oracle", gradient_oracle),
    ("single-stage degenerate case", degenerate_case),
    ("schedule algebra", schedule_algebra),
    ("solver correctness", solvers),
    ("packing equivalence", packing),
    ("rope relative position", rope),
    ("renoise variance", renoise),
    ("stage-wise cfg schedule", cfg_schedule),
    ("end-to-end overfit", overfit),
    ("determinism and persistence", determinism),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let (ok, detail) = run().unwrap_or_else(|err| (false, format!("error: {err}")));
        failed += usize::from(!ok);
        println!("criterion {n:>2} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
