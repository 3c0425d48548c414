//! Fixed-step Euler and adaptive Dormand–Prince 5(4) over τ ∈ [0, 1].

use crate::error::{Error, Result};
use crate::image::Image;

/// Work done by an integrator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Smallest step dopri5 will attempt before giving up.
pub const MIN_STEP: f64 = 1e-12;
const MAX_STEPS: usize = 100_000;
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

fn check_finite(x: &Image, what: impl FnOnce() -> String) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// `n` uniform steps of `x += Δτ·v(τ, x)`.
pub fn euler<F>(mut f: F, x0: &Image, n: usize) -> Result<(Image, SolverStats)>
where
    F: FnMut(f64, &Image) -> Result<Image>,
{
    if n == 0 {
        return Err(Error::invalid("euler: need at least one step"));
    }
    let h = 1.0 / n as f64;
    let mut x = x0.clone();
    for i in 0..n {
        let tau = i as f64 / n as f64;
        let v = f(tau, &x)?;
        x.same_dims(&v, "euler")?;
        for (xi, vi) in x.values_mut().iter_mut().zip(v.values()) {
            *xi += h * vi;
        }
        check_finite(&x, || format!("euler state after step {i}"))?;
    }
    let stats = SolverStats {
        accepted: n,
        rejected: 0,
        evaluations: n,
    };
    Ok((x, stats))
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order ones.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand–Prince from τ = 0 to 1, first trying the whole interval.
///
/// A step is accepted when the RMS of its local error estimate is at most
/// `atol`. The last stage evaluation is reused as the next step's first.
pub fn dopri5<F>(mut f: F, x0: &Image, atol: f64) -> Result<(Image, SolverStats)>
where
    F: FnMut(f64, &Image) -> Result<Image>,
{
    if !(atol > 0.0 && atol.is_finite()) {
        return Err(Error::invalid(format!("dopri5: atol must be positive, got {atol}")));
    }
    let n = x0.values().len();
    let mut stats = SolverStats::default();
    let mut eval = |tau: f64, x: &Image, stats: &mut SolverStats| -> Result<Vec<f64>> {
        stats.evaluations += 1;
        let v = f(tau, x)?;
        x.same_dims(&v, "dopri5")?;
        Ok(v.into_values())
    };

    let mut x = x0.clone();
    let mut tau = 0.0;
    let mut h: f64 = 1.0;
    let mut k1 = eval(tau, &x, &mut stats)?;
    let mut stage = x.clone();
    while tau < 1.0 {
        if stats.accepted + stats.rejected >= MAX_STEPS {
            return Err(Error::invalid(format!("dopri5: exceeded {MAX_STEPS} steps at tau={tau}")));
        }
        h = h.min(1.0 - tau);
        if h < MIN_STEP {
            return Err(Error::StepUnderflow { tau, h });
        }

        let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
        k.push(std::mem::take(&mut k1));
        for (i, row) in A.iter().enumerate().skip(1) {
            let base = x.values();
            // Rows sum to C[i]; writing them relative to k1 keeps constant fields exact.
            for (j, s) in stage.values_mut().iter_mut().enumerate() {
                let k1j = k[0][j];
                let mut acc = C[i] * k1j;
                for (a, kk) in row.iter().zip(&k).skip(1) {
                    acc += a * (kk[j] - k1j);
                }
                *s = base[j] + h * acc;
            }
            let t_i = if i == 6 { tau + h } else { tau + C[i] * h };
            k.push(eval(t_i, &stage, &mut stats)?);
        }
        // `stage` now holds the fifth-order solution at tau + h.

        let mut sq = 0.0;
        for j in 0..n {
            let mut e = 0.0;
            for (w, kk) in E.iter().zip(&k) {
                e += w * kk[j];
            }
            let r = h * e / atol;
            sq += r * r;
        }
        let err = (sq / n.max(1) as f64).sqrt();
        if !err.is_finite() || !stage.is_finite() {
            return Err(Error::NonFinite(format!("dopri5 step at tau={tau}, h={h:e}")));
        }

        let factor = if err == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        if err <= 1.0 {
            stats.accepted += 1;
            tau = if h >= 1.0 - tau { 1.0 } else { tau + h };
            std::mem::swap(&mut x, &mut stage);
            k1 = k.pop().expect("seven stages");
            h *= factor;
        } else {
            stats.rejected += 1;
            k1 = k.swap_remove(0);
            h *= factor.min(1.0);
        }
    }
    Ok((x, stats))
}
