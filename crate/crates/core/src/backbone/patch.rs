//! Rearrangement between images and rows of flattened patches.
//!
//! Tokens are emitted in row-major grid order. Inside a token the values are
//! ordered `(channel, dy, dx)`.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Tensor;

/// `[(H/p) * (W/p), p * p * C]` patch rows.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!("patchify: {h}x{w} is not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out.push(img.at(ch, gy * patch + dy, gx * patch + dx));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Inverse of [`patchify`] for a `resolution x resolution` image.
pub fn unpatchify(tokens: &[f64], patch: usize, channels: usize, resolution: usize) -> Result<Image> {
    if patch == 0 || !resolution.is_multiple_of(patch) {
        return Err(Error::invalid(format!(
            "unpatchify: resolution {resolution} is not divisible by patch {patch}"
        )));
    }
    let g = resolution / patch;
    let dim = patch * patch * channels;
    if tokens.len() != g * g * dim {
        return Err(Error::invalid(format!(
            "unpatchify: expected {} tokens of width {dim}, got {} values",
            g * g,
            tokens.len()
        )));
    }
    let mut values = vec![0.0; channels * resolution * resolution];
    for gy in 0..g {
        for gx in 0..g {
            let tok = &tokens[(gy * g + gx) * dim..(gy * g + gx + 1) * dim];
            let mut i = 0;
            for ch in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let (y, x) = (gy * patch + dy, gx * patch + dx);
                        values[(ch * resolution + y) * resolution + x] = tok[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Image::new(channels, resolution, resolution, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_counts() {
        let img = Image::filled(3, 4, 4, 0.0);
        assert_eq!(patchify(&img, 4).unwrap().shape(), &[1, 48]);
        let img = Image::filled(3, 32, 32, 0.0);
        assert_eq!(patchify(&img, 4).unwrap().shape(), &[64, 48]);
        assert!(patchify(&Image::filled(1, 6, 6, 0.0), 4).is_err());
    }

    #[test]
    fn round_trip() {
        let img = Image::randn(3, 8, 8, &mut ChaCha8Rng::seed_from_u64(3));
        let toks = patchify(&img, 2).unwrap();
        assert_eq!(unpatchify(toks.data(), 2, 3, 8).unwrap(), img);
    }

    #[test]
    fn zero_tokens_give_zero_image() {
        let img = unpatchify(&[0.0; 4 * 12], 2, 3, 4).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
        assert!(unpatchify(&[0.0; 12], 2, 3, 4).is_err());
    }

    #[test]
    fn one_hot_token_lands_in_its_block() {
        // 2x2 grid of 2x2 patches, one channel; light up token (1, 0), entry (dy=1, dx=0).
        let mut toks = vec![0.0; 4 * 4];
        toks[2 * 4 + 2] = 1.0;
        let img = unpatchify(&toks, 2, 1, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expected = if (y, x) == (3, 0) { 1.0 } else { 0.0 };
                assert_eq!(img.at(0, y, x), expected, "({y}, {x})");
            }
        }
    }
}
