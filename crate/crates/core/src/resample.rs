//! Resolution changes between adjacent stages.
//!
//! Downsampling is bilinear with half-pixel centers. For a factor of two the
//! output pixel `i` samples input coordinate `2i + 0.5`, the midpoint of
//! pixels `2i` and `2i + 1`, so each reduction is exactly a 2x2 mean.
//! Larger factors are applied as repeated halvings. Upsampling is nearest
//! neighbour: every pixel becomes a `factor x factor` block.

use crate::error::{Error, Result};
use crate::image::Image;

fn log2_factor(factor: usize) -> Result<u32> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::invalid(format!("resample: factor {factor} is not a power of two")));
    }
    Ok(factor.trailing_zeros())
}

fn halve(img: &Image) -> Image {
    let (c, h, w) = img.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let s = img.at(ch, 2 * y, 2 * x)
                    + img.at(ch, 2 * y, 2 * x + 1)
                    + img.at(ch, 2 * y + 1, 2 * x)
                    + img.at(ch, 2 * y + 1, 2 * x + 1);
                out.push(0.25 * s);
            }
        }
    }
    Image::new(c, oh, ow, out).expect("halved dims are positive")
}

pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    let steps = log2_factor(factor)?;
    let (_, h, w) = img.dims();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "downsample: {h}x{w} is not divisible by factor {factor}"
        )));
    }
    let mut cur = img.clone();
    for _ in 0..steps {
        cur = halve(&cur);
    }
    Ok(cur)
}

pub fn upsample(img: &Image, factor: usize) -> Result<Image> {
    log2_factor(factor)?;
    if factor == 1 {
        return Ok(img.clone());
    }
    let (c, h, w) = img.dims();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.push(img.at(ch, y / factor, x / factor));
            }
        }
    }
    Image::new(c, oh, ow, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize, v: Vec<f64>) -> Image {
        Image::new(1, h, w, v).unwrap()
    }

    #[test]
    fn two_by_two_mean() {
        let img = gray(2, 2, vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(downsample(&img, 2).unwrap().values(), &[4.0]);
    }

    #[test]
    fn constants_survive() {
        let img = Image::filled(3, 8, 8, -0.3);
        for f in [1, 2, 4, 8] {
            let d = downsample(&img, f).unwrap();
            assert!(d.values().iter().all(|&v| v == -0.3));
        }
    }

    #[test]
    fn ramp_factor_four_is_global_mean() {
        let vals: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let d = downsample(&gray(4, 4, vals), 4).unwrap();
        assert!((d.values()[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn nearest_upsample_replicates() {
        let up = upsample(&gray(1, 1, vec![4.0]), 2).unwrap();
        assert_eq!(up.dims(), (1, 2, 2));
        assert_eq!(up.values(), &[4.0; 4]);
        let img = Image::randn(2, 3, 5, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(upsample(&img, 1).unwrap(), img);
    }

    #[test]
    fn rejects_bad_factors() {
        let img = Image::filled(1, 6, 6, 0.0);
        assert!(downsample(&img, 4).is_err());
        assert!(downsample(&img, 3).is_err());
        assert!(upsample(&img, 0).is_err());
    }

    proptest! {
        #[test]
        fn down_after_up_is_identity(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
            let img = Image::randn(3, h, w, &mut ChaCha8Rng::seed_from_u64(seed));
            let back = downsample(&upsample(&img, 2).unwrap(), 2).unwrap();
            prop_assert!(back.max_abs_diff(&img) <= 1e-12);
        }

        #[test]
        fn downsample_preserves_mean(seed in any::<u64>(), k in 1usize..4) {
            let img = Image::randn(2, 8 * k, 8, &mut ChaCha8Rng::seed_from_u64(seed));
            for f in [2usize, 4, 8] {
                let d = downsample(&img, f).unwrap();
                prop_assert!((d.mean() - img.mean()).abs() <= 1e-12);
            }
        }

        #[test]
        fn up_down_idempotent_on_block_constant(seed in any::<u64>()) {
            let base = Image::randn(1, 4, 4, &mut ChaCha8Rng::seed_from_u64(seed));
            let blocky = upsample(&base, 2).unwrap();
            let again = upsample(&downsample(&blocky, 2).unwrap(), 2).unwrap();
            prop_assert!(again.max_abs_diff(&blocky) <= 1e-12);
        }
    }
}
