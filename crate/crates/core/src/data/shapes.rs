//! Procedural class-conditional dataset: each class is a (shape, hue) pair
//! rendered at a random position, scale and rotation on a random gray
//! background.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const HUES: [(&str, [f64; 3]); 4] = [
    ("red", [0.95, 0.2, 0.15]),
    ("blue", [0.2, 0.35, 0.95]),
    ("green", [0.2, 0.85, 0.3]),
    ("yellow", [0.95, 0.85, 0.15]),
];
pub const MAX_CLASSES: usize = SHAPES.len() * HUES.len();
pub const RESOLUTIONS: [usize; 3] = [16, 32, 64];

const SUPERSAMPLE: usize = 4;

pub fn class_name(class: usize) -> String {
    format!("{}-{}", HUES[class / SHAPES.len()].0, SHAPES[class % SHAPES.len()])
}

/// `(u, v)` in the shape's rotated frame, scaled so the shape spans roughly the unit disc.
fn inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => {
            // Equilateral triangle inscribed in the unit circle, apex up.
            v >= -0.5 && v <= 1.0 - 3f64.sqrt() * u.abs()
        }
        _ => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
    }
}

fn render(class: usize, resolution: usize, rng: &mut ChaCha8Rng) -> Image {
    let shape = class % SHAPES.len();
    let color = HUES[class / SHAPES.len()].1;
    let res = resolution as f64;
    let cx = rng.random_range(0.35..0.65) * res;
    let cy = rng.random_range(0.35..0.65) * res;
    let radius = rng.random_range(0.22..0.34) * res;
    let angle = rng.random_range(0.0..2.0 * PI);
    let background = rng.random_range(-0.9..-0.3);
    let brightness = rng.random_range(0.85..1.0);
    let (ca, sa) = (angle.cos(), angle.sin());

    let fg: Vec<f64> = color.iter().map(|c| 2.0 * c * brightness - 1.0).collect();
    let mut values = vec![0.0; 3 * resolution * resolution];
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..resolution {
        for x in 0..resolution {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - cx;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - cy;
                    // Image y grows downwards; flip so "up" is -y.
                    let u = (ca * px + sa * py) / radius;
                    let v = (sa * px - ca * py) / radius;
                    hits += inside(shape, u, v) as usize;
                }
            }
            let cover = hits as f64 / n_sub;
            for ch in 0..3 {
                let val = cover * fg[ch] + (1.0 - cover) * background;
                // Stored as f32 on disk; quantize now so persistence is lossless.
                values[(ch * resolution + y) * resolution + x] = val.clamp(-1.0, 1.0) as f32 as f64;
            }
        }
    }
    Image::new(3, resolution, resolution, values).expect("render dims")
}

/// `n` images with round-robin labels; image `i` is drawn from its own
/// ChaCha stream so items can be generated independently.
pub fn gen_shapes_dataset(n: usize, resolution: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::invalid(format!(
            "shapes dataset: unsupported resolution {resolution} (supported: {RESOLUTIONS:?})"
        )));
    }
    if num_classes == 0 || num_classes > MAX_CLASSES {
        return Err(Error::invalid(format!(
            "shapes dataset: num_classes must be in 1..={MAX_CLASSES}, got {num_classes}"
        )));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let class = i % num_classes;
        images.push(render(class, resolution, &mut rng));
        labels.push(class);
    }
    Dataset::new(images, labels, (0..num_classes).map(class_name).collect(), seed)
}
