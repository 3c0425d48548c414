use pixflow::flow::{interpolate, make_endpoints};
use pixflow::resample::{downsample, upsample};
use pixflow::schedule::StageSchedule;
use pixflow::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean and spread of x_t around its clean component, pooled over pixels and draws.
#[test]
fn marginal_mean_and_noise_std_match_closed_form() {
    let sched = StageSchedule::new(4, 64, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x1 = Image::randn(1, 64, 64, &mut rng).map(|v| v.clamp(-1.0, 1.0));
    for (s, tau) in [(1usize, 0.3), (2, 0.8), (3, 0.5)] {
        let (t0, t1) = sched.interval(s).unwrap();
        let r = sched.resolution(s).unwrap();
        let end_clean = downsample(&x1, 1 << s).unwrap();
        let start_clean = upsample(&downsample(&x1, 1 << (s + 1)).unwrap(), 2).unwrap();
        let mean = end_clean.lincomb(tau * t1, &start_clean, (1.0 - tau) * t0).unwrap();
        let std = tau * (1.0 - t1) + (1.0 - tau) * (1.0 - t0);

        let draws = 100_000usize.div_ceil(r * r);
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
        for _ in 0..draws {
            let eps = Image::randn(1, r, r, &mut rng);
            let (a, b) = make_endpoints(&x1, &eps, s, &sched).unwrap();
            let xt = interpolate(&a, &b, tau).unwrap();
            for (x, m) in xt.values().iter().zip(mean.values()) {
                let d = x - m;
                sum += d;
                sq += d * d;
                n += 1;
            }
        }
        assert!(n >= 100_000);
        let bias = sum / n as f64;
        let emp = (sq / n as f64 - bias * bias).sqrt();
        assert!(bias.abs() < 0.02 * std, "stage {s}: bias {bias}");
        assert!((emp - std).abs() < 0.02 * std, "stage {s}: std {emp} vs {std}");
    }
}
