//! Two-axis rotary position embedding.
//!
//! Each head is split in half: the first half rotates with the token's grid
//! row, the second half with its grid column. Within a half of width `d`,
//! pair `(2i, 2i + 1)` rotates at frequency `base^(-2i / d)`.

use crate::error::{Error, Result};
use crate::numerics::PairRotation;

pub const ROPE_BASE: f64 = 10_000.0;

/// Per-token rotation table for `positions` (`(row, col)` pairs).
pub fn rope_rotation(positions: &[(usize, usize)], head_dim: usize) -> Result<PairRotation> {
    if head_dim == 0 || !head_dim.is_multiple_of(4) {
        return Err(Error::invalid(format!("rope: head_dim {head_dim} is not divisible by 4")));
    }
    let half = head_dim / 2;
    let quarter = head_dim / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| ROPE_BASE.powf(-((2 * i) as f64) / half as f64))
        .collect();
    let pairs = half;
    let mut cos = Vec::with_capacity(positions.len() * pairs);
    let mut sin = Vec::with_capacity(positions.len() * pairs);
    for &(row, col) in positions {
        for axis_pos in [row, col] {
            for f in &freqs {
                let angle = axis_pos as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
    }
    Ok(PairRotation {
        rows: positions.len(),
        pairs,
        cos,
        sin,
    })
}

/// Rotates `x` (`[positions.len(), head_dim]`, one head) by the positions' angles.
pub fn apply_rope_2d(x: &[f64], positions: &[(usize, usize)], head_dim: usize) -> Result<Vec<f64>> {
    let rot = rope_rotation(positions, head_dim)?;
    if x.len() != positions.len() * head_dim {
        return Err(Error::invalid(format!(
            "rope: {} values for {} positions of width {head_dim}",
            x.len(),
            positions.len()
        )));
    }
    let mut out = x.to_vec();
    for (r, row) in out.chunks_mut(head_dim).enumerate() {
        for j in 0..rot.pairs {
            let (c, s) = (rot.cos[r * rot.pairs + j], rot.sin[r * rot.pairs + j]);
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = a * c - b * s;
            row[2 * j + 1] = a * s + b * c;
        }
    }
    Ok(out)
}
