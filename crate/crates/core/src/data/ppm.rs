use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn to_byte(v: f64) -> u8 {
    // Round half up, so 0.0 lands on 128.
    let x = ((v + 1.0) / 2.0 * 255.0).clamp(0.0, 255.0);
    (x + 0.5).floor() as u8
}

/// Binary P6 encoding of a 3-channel image with values in [-1, 1].
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims();
    if c != 3 {
        return Err(Error::invalid(format!("ppm: expected 3 channels, got {c}")));
    }
    if !img.is_finite() {
        return Err(Error::NonFinite("ppm: image contains non-finite pixels".into()));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_byte(img.at(ch, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}
