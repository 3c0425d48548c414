use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(format!("finite_diff_grad: step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff_grad: f is not finite around element {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Analytic gradient of the scalar built by `build` with respect to each input.
pub fn tape_grads<B>(inputs: &[Tensor], build: B) -> Result<Vec<Tensor>>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| Ok(tape.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(t.shape()))))
        .collect()
}

/// Central differences of the same scalar, input by input.
pub fn tape_numeric_grads<B>(inputs: &[Tensor], build: B, h: f64) -> Result<Vec<Tensor>>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).item()
    };
    (0..inputs.len())
        .map(|i| {
            let mut xs = inputs.to_vec();
            finite_diff_grad(
                |x| {
                    xs[i] = x.clone();
                    eval(&xs)
                },
                &inputs[i],
                h,
            )
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
