//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. Nodes whose inputs do
//! not require gradients are stored as constants and never revisited, so a
//! tape built from constant leaves doubles as a plain inference engine.
//!
//! `backward` accumulates into the grad buffers of leaves registered with
//! `requires_grad = true`. Calling it again without [`Tape::zero_grad`] adds
//! to the existing buffers.

use std::rc::Rc;

use super::gemm::{gemm, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-row rotation angles for [`Tape::rotate_pairs`], stored as cos/sin of
/// shape `[rows, pairs]` where `pairs = head_dim / 2`.
#[derive(Clone, Debug)]
pub struct PairRotation {
    pub rows: usize,
    pub pairs: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Binary { kind: Binary, a: usize, b: usize },
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Transpose(usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    /// Keeps `sigmoid(2u)` from the forward pass.
    Gelu { x: usize, gate: Vec<f64> },
    Silu(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    ExpandSegments { x: usize, lens: Rc<[usize]> },
    Modulate { x: usize, shift: usize, scale: usize, lens: Rc<[usize]> },
    GatedAdd { x: usize, y: usize, gate: usize, lens: Rc<[usize]> },
    RotatePairs { x: usize, rot: Rc<PairRotation> },
    Attention { q: usize, k: usize, v: usize, lens: Rc<[usize]>, heads: usize, probs: Vec<f64> },
    GatherRows { table: usize, idx: Vec<usize> },
    SegmentMse { pred: usize, target: usize, lens: Rc<[usize]> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::MatMul(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Softmax(x)
            | Op::LayerNorm { x, .. }
            | Op::Gelu { x, .. }
            | Op::Silu(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::ExpandSegments { x, .. }
            | Op::RotatePairs { x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Modulate { x, shift, scale, .. } => vec![*x, *shift, *scale],
            Op::GatedAdd { x, y, gate, .. } => vec![*x, *y, *gate],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::GatherRows { table, .. } => vec![*table],
            Op::SegmentMse { pred, target, .. } => vec![*pred, *target],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn segment_offsets(lens: &[usize]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(lens.len() + 1);
    let mut o = 0;
    offs.push(0);
    for &l in lens {
        o += l;
        offs.push(o);
    }
    offs
}

fn softmax_rows(data: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = 1.0 / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::invalid(format!("{op}: expected a 2-D tensor, got shape {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: if requires_grad { Op::Leaf } else { Op::Constant },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?.to_vec();
        Tensor::new(self.shape(v).to_vec(), g).ok()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let broadcast_ok = sa == sb || (!sb.is_empty() && sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !broadcast_ok || tb.numel() == 0 {
            return Err(Error::Shape {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bn = tb.numel();
        let bd = tb.data();
        let data: Vec<f64> = ta
            .data()
            .chunks(bn)
            .flat_map(|chunk| {
                chunk.iter().zip(bd).map(move |(&x, &y)| match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                })
            })
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Binary { kind, a: a.0, b: b.0 }))
    }

    /// `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.val(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect()).unwrap();
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.val(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect()).unwrap();
        self.push(value, Op::AddScalar(a.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.val(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap();
        self.push(value, op)
    }

    /// Tanh-approximated GELU, `0.5 x (1 + tanh(u)) = x * sigmoid(2u)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let gate: Vec<f64> = t
            .data()
            .iter()
            .map(|&x| sigmoid(2.0 * GELU_C * (x + GELU_A * x * x * x)))
            .collect();
        let data = t.data().iter().zip(&gate).map(|(x, s)| x * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(value, Op::Gelu { x: a.0, gate })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a.0))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if t.numel() == 0 {
            return Err(Error::invalid("mean: empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a.0)))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = check_2d("matmul", ta)?;
        let (k2, n) = check_2d("matmul", tb)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(1.0, ta.data(), View::dense(m, k), tb.data(), View::dense(k, n), 0.0, &mut out, View::dense(m, n));
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    /// `x @ w + b` where `x` is `[.., in]`, `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(w));
        let (k, n) = check_2d("linear", tw)?;
        if tx.cols() != k || tx.shape().is_empty() {
            return Err(Error::Shape {
                op: "linear",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let m = tx.rows();
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let tb = self.val(b);
            if tb.shape() != [n] {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: vec![n],
                    rhs: tb.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(tb.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(1.0, tx.data(), View::dense(m, k), tw.data(), View::dense(k, n), beta, &mut out, View::dense(m, n));
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let (m, n) = check_2d("transpose", t)?;
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a.0)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a.0)))
    }

    // ── slicing ────────────────────────────────────────────────────────

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.val(a);
        let c = t.cols();
        if t.shape().is_empty() || start + len > c {
            return Err(Error::invalid(format!(
                "slice_cols: range {start}..{} out of bounds for shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for row in t.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceCols { x: a.0, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols: no inputs"))?;
        let lead = self.val(*first).shape().split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let mut total = 0;
        for p in parts {
            let s = self.val(*p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.val(*first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let t = self.val(*p);
                let c = t.cols();
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|v| v.0).collect())))
    }

    /// Entries `start..start + len` of the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.val(a);
        let Some(&r) = t.shape().first() else {
            return Err(Error::invalid("slice_rows: scalar input"));
        };
        if start + len > r {
            return Err(Error::invalid(format!(
                "slice_rows: range {start}..{} out of bounds for shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let inner = t.numel() / r.max(1);
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceRows { x: a.0, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows: no inputs"))?;
        let tail = self.val(*first).shape().get(1..).map(|s| s.to_vec()).unwrap_or_default();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let t = self.val(*p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.val(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|v| v.0).collect())))
    }

    // ── normalization ──────────────────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let mut data = t.data().to_vec();
        softmax_rows(&mut data, t.cols());
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(value, Op::Softmax(a.0))
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.val(a);
        let c = t.cols();
        if c == 0 || t.shape().is_empty() {
            return Err(Error::invalid(format!("layer_norm: bad shape {:?}", t.shape())));
        }
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * r;
            }
            inv_std.push(r);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LayerNorm { x: a.0, inv_std }))
    }

    // ── segment ops (packed sequences) ─────────────────────────────────

    fn check_segments(&self, op: &'static str, rows: usize, lens: &[usize], per_seg: Var) -> Result<usize> {
        let total: usize = lens.iter().sum();
        if total != rows {
            return Err(Error::invalid(format!(
                "{op}: segment lengths sum to {total} but input has {rows} rows"
            )));
        }
        let s = self.val(per_seg);
        if s.shape().len() != 2 || s.shape()[0] != lens.len() {
            return Err(Error::Shape {
                op,
                lhs: vec![lens.len(), s.cols()],
                rhs: s.shape().to_vec(),
            });
        }
        Ok(s.cols())
    }

    /// Repeats row `b` of `x` (`[B, d]`) `lens[b]` times.
    pub fn expand_segments(&mut self, x: Var, lens: Rc<[usize]>) -> Result<Var> {
        let total: usize = lens.iter().sum();
        let d = self.check_segments("expand_segments", total, &lens, x)?;
        let t = self.val(x);
        let mut out = Vec::with_capacity(total * d);
        for (b, &l) in lens.iter().enumerate() {
            let row = &t.data()[b * d..(b + 1) * d];
            for _ in 0..l {
                out.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![total, d], out)?;
        Ok(self.push(value, Op::ExpandSegments { x: x.0, lens }))
    }

    /// `x * (1 + scale[seg]) + shift[seg]` with per-segment `shift`, `scale` of shape `[B, d]`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var, lens: Rc<[usize]>) -> Result<Var> {
        let tx = self.val(x);
        let d = tx.cols();
        let rows = tx.rows();
        for s in [shift, scale] {
            if self.check_segments("modulate", rows, &lens, s)? != d {
                return Err(Error::Shape {
                    op: "modulate",
                    lhs: tx.shape().to_vec(),
                    rhs: self.val(s).shape().to_vec(),
                });
            }
        }
        let (sh, sc) = (self.val(shift).data(), self.val(scale).data());
        let mut out = tx.data().to_vec();
        let offs = segment_offsets(&lens);
        for b in 0..lens.len() {
            let (shr, scr) = (&sh[b * d..(b + 1) * d], &sc[b * d..(b + 1) * d]);
            for row in out[offs[b] * d..offs[b + 1] * d].chunks_mut(d) {
                for j in 0..d {
                    row[j] = row[j] * (1.0 + scr[j]) + shr[j];
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Modulate {
                x: x.0,
                shift: shift.0,
                scale: scale.0,
                lens,
            },
        ))
    }

    /// `x + gate[seg] * y` with per-segment `gate` of shape `[B, d]`.
    pub fn gated_add(&mut self, x: Var, y: Var, gate: Var, lens: Rc<[usize]>) -> Result<Var> {
        let (tx, ty) = (self.val(x), self.val(y));
        if tx.shape() != ty.shape() {
            return Err(Error::Shape {
                op: "gated_add",
                lhs: tx.shape().to_vec(),
                rhs: ty.shape().to_vec(),
            });
        }
        let d = tx.cols();
        if self.check_segments("gated_add", tx.rows(), &lens, gate)? != d {
            return Err(Error::Shape {
                op: "gated_add",
                lhs: tx.shape().to_vec(),
                rhs: self.val(gate).shape().to_vec(),
            });
        }
        let g = self.val(gate).data();
        let mut out = tx.data().to_vec();
        let offs = segment_offsets(&lens);
        let yd = ty.data();
        for b in 0..lens.len() {
            let gr = &g[b * d..(b + 1) * d];
            let range = offs[b] * d..offs[b + 1] * d;
            for (row, yrow) in out[range.clone()].chunks_mut(d).zip(yd[range].chunks(d)) {
                for j in 0..d {
                    row[j] += gr[j] * yrow[j];
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::GatedAdd {
                x: x.0,
                y: y.0,
                gate: gate.0,
                lens,
            },
        ))
    }

    /// Rotates consecutive pairs `(2j, 2j+1)` within every head of every row.
    pub fn rotate_pairs(&mut self, x: Var, rot: Rc<PairRotation>) -> Result<Var> {
        let t = self.val(x);
        let head_dim = 2 * rot.pairs;
        if t.rows() != rot.rows || head_dim == 0 || !t.cols().is_multiple_of(head_dim) {
            return Err(Error::invalid(format!(
                "rotate_pairs: input {:?} incompatible with {} rows of {} pairs",
                t.shape(),
                rot.rows,
                rot.pairs
            )));
        }
        let mut out = t.data().to_vec();
        rotate_in_place(&mut out, t.cols(), &rot, 1.0);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::RotatePairs { x: x.0, rot }))
    }

    /// Multi-head softmax attention restricted to contiguous row segments.
    ///
    /// `q`, `k`, `v` are `[N, heads * head_dim]`. Row `i` attends only to rows
    /// of its own segment, which is the block-diagonal mask of a packed batch.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, lens: Rc<[usize]>, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.val(q), self.val(k), self.val(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 2 {
            return Err(Error::Shape {
                op: "segment_attention",
                lhs: tq.shape().to_vec(),
                rhs: if tq.shape() != tk.shape() { tk.shape() } else { tv.shape() }.to_vec(),
            });
        }
        let (n, d) = (tq.shape()[0], tq.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("segment_attention: width {d} not divisible by {heads} heads")));
        }
        if lens.iter().sum::<usize>() != n {
            return Err(Error::invalid("segment_attention: segment lengths do not cover all rows"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let offs = segment_offsets(&lens);
        let prob_len: usize = lens.iter().map(|l| l * l).sum::<usize>() * heads;
        let mut probs = vec![0.0; prob_len];
        let mut out = vec![0.0; n * d];
        let mut p_off = 0;
        for (si, &l) in lens.iter().enumerate() {
            let o = offs[si];
            for h in 0..heads {
                let p = &mut probs[p_off..p_off + l * l];
                let qv = View::row_major(o * d + h * dh, l, dh, d);
                let kv = View::row_major(o * d + h * dh, l, dh, d);
                gemm(scale, tq.data(), qv, tk.data(), kv.t(), 0.0, p, View::dense(l, l));
                softmax_rows(p, l);
                let vv = View::row_major(o * d + h * dh, l, dh, d);
                gemm(1.0, p, View::dense(l, l), tv.data(), vv, 0.0, &mut out, vv);
                p_off += l * l;
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                lens,
                heads,
                probs,
            },
        ))
    }

    /// Rows `idx` of `table` (`[R, d]`).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(table);
        let (r, d) = check_2d("gather_rows", t)?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= r {
                return Err(Error::invalid(format!("gather_rows: index {i} out of range for {r} rows")));
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Mean squared error.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let rows = self.val(pred).rows();
        self.segment_mse(pred, target, Rc::from(vec![rows]))
    }

    /// Average over segments of the per-segment mean squared error.
    pub fn segment_mse(&mut self, pred: Var, target: Var, lens: Rc<[usize]>) -> Result<Var> {
        let (tp, tt) = (self.val(pred), self.val(target));
        if tp.shape() != tt.shape() {
            return Err(Error::Shape {
                op: "mse",
                lhs: tp.shape().to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        let c = tp.cols();
        if lens.is_empty() || lens.iter().sum::<usize>() != tp.rows() || lens.contains(&0) {
            return Err(Error::invalid("mse: segment lengths must be positive and cover all rows"));
        }
        let offs = segment_offsets(&lens);
        let mut total = 0.0;
        for b in 0..lens.len() {
            let r = offs[b] * c..offs[b + 1] * c;
            let n = (lens[b] * c) as f64;
            let s: f64 = tp.data()[r.clone()]
                .iter()
                .zip(&tt.data()[r])
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            total += s / n;
        }
        let value = Tensor::scalar(total / lens.len() as f64);
        Ok(self.push(
            value,
            Op::SegmentMse {
                pred: pred.0,
                target: target.0,
                lens,
            },
        ))
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Accumulates d(output)/d(leaf) into every gradient-tracking leaf.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let node = &self.nodes[output.0];
        if node.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "output must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward("output is not connected to any gradient-tracking leaf".into()));
        }
        let mut work: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        work[output.0] = Some(vec![1.0]);
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let contributions = self.vjp(i, &g);
            for (id, grad) in contributions {
                match &mut work[id] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each input requiring grad.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        let inp = |id: usize| self.nodes[id].value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary { kind, a, b } => {
                let (ad, bd) = (inp(*a), inp(*b));
                let bn = bd.len();
                if self.needs(*a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(j, gv)| gv * bd[j % bn]).collect(),
                    };
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; bn];
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % bn] += match kind {
                            Binary::Add => *gv,
                            Binary::Sub => -gv,
                            Binary::Mul => gv * ad[j],
                        };
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|v| v * c).collect())),
            Op::AddScalar(a) | Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(1.0, g, View::dense(m, n), tb.data(), View::dense(k, n).t(), 0.0, &mut ga, View::dense(m, k));
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(1.0, ta.data(), View::dense(m, k).t(), g, View::dense(m, n), 0.0, &mut gb, View::dense(k, n));
                    out.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = tx.rows();
                if self.needs(*x) {
                    let mut gx = vec![0.0; m * k];
                    gemm(1.0, g, View::dense(m, n), tw.data(), View::dense(k, n).t(), 0.0, &mut gx, View::dense(m, k));
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(1.0, tx.data(), View::dense(m, k).t(), g, View::dense(m, n), 0.0, &mut gw, View::dense(k, n));
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![0.0; n];
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        out.push((*b, gb));
                    }
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (n, m) = (s[0], s[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] = g[i * m + j];
                    }
                }
                out.push((*a, ga));
            }
            Op::SliceCols { x, start } => {
                let tx = &self.nodes[*x].value;
                let (c, len) = (tx.cols(), node.value.cols());
                let mut gx = vec![0.0; tx.numel()];
                for (dst, src) in gx.chunks_mut(c).zip(g.chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                out.push((*x, gx));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(self.nodes[p].value.numel());
                        for row in g.chunks(total) {
                            gp.extend_from_slice(&row[col..col + c]);
                        }
                        out.push((p, gp));
                    }
                    col += c;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = &self.nodes[*x].value;
                let inner = tx.numel() / tx.shape()[0].max(1);
                let mut gx = vec![0.0; tx.numel()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g);
                out.push((*x, gx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    if self.needs(p) {
                        out.push((p, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((dst, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, ga));
            }
            Op::LayerNorm { x, inv_std } => {
                let c = node.value.cols();
                let cf = c as f64;
                let mut gx = vec![0.0; g.len()];
                for (r, ((dst, gr), yr)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / cf;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cf;
                    for j in 0..c {
                        dst[j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                out.push((*x, gx));
            }
            Op::Gelu { x: a, gate } => {
                let ad = inp(*a);
                let ga = g
                    .iter()
                    .zip(ad)
                    .zip(gate)
                    .map(|((gv, &x), &s)| {
                        let du = 2.0 * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gv * (s + x * s * (1.0 - s) * du)
                    })
                    .collect();
                out.push((*a, ga));
            }
            Op::Silu(a) => {
                let ad = inp(*a);
                let ga = g
                    .iter()
                    .zip(ad)
                    .map(|(gv, &x)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                out.push((*a, ga));
            }
            Op::Sin(a) => out.push((*a, g.iter().zip(inp(*a)).map(|(gv, x)| gv * x.cos()).collect())),
            Op::Cos(a) => out.push((*a, g.iter().zip(inp(*a)).map(|(gv, x)| -gv * x.sin()).collect())),
            Op::Square(a) => out.push((*a, g.iter().zip(inp(*a)).map(|(gv, x)| 2.0 * gv * x).collect())),
            Op::Sum(a) => out.push((*a, vec![g[0]; inp(*a).len()])),
            Op::Mean(a) => {
                let n = inp(*a).len();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::ExpandSegments { x, lens } => {
                let d = node.value.cols();
                let mut gx = vec![0.0; lens.len() * d];
                let mut rows = g.chunks(d);
                for (b, &l) in lens.iter().enumerate() {
                    let acc = &mut gx[b * d..(b + 1) * d];
                    for row in rows.by_ref().take(l) {
                        acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
                out.push((*x, gx));
            }
            Op::Modulate { x, shift, scale, lens } => {
                let d = node.value.cols();
                let offs = segment_offsets(lens);
                let (xd, scd) = (inp(*x), inp(*scale));
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for b in 0..lens.len() {
                        let sc = &scd[b * d..(b + 1) * d];
                        let r = offs[b] * d..offs[b + 1] * d;
                        for (dst, gr) in gx[r.clone()].chunks_mut(d).zip(g[r].chunks(d)) {
                            for j in 0..d {
                                dst[j] = gr[j] * (1.0 + sc[j]);
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                let mut gshift = vec![0.0; lens.len() * d];
                let mut gscale = vec![0.0; lens.len() * d];
                for b in 0..lens.len() {
                    let r = offs[b] * d..offs[b + 1] * d;
                    let (gs, gc) = (&mut gshift[b * d..(b + 1) * d], &mut gscale[b * d..(b + 1) * d]);
                    for (gr, xr) in g[r.clone()].chunks(d).zip(xd[r].chunks(d)) {
                        for j in 0..d {
                            gs[j] += gr[j];
                            gc[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.needs(*shift) {
                    out.push((*shift, gshift));
                }
                if self.needs(*scale) {
                    out.push((*scale, gscale));
                }
            }
            Op::GatedAdd { x, y: yid, gate, lens } => {
                let d = node.value.cols();
                let offs = segment_offsets(lens);
                let (yd, gd) = (inp(*yid), inp(*gate));
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.needs(*yid) {
                    let mut gy = vec![0.0; g.len()];
                    for b in 0..lens.len() {
                        let gt = &gd[b * d..(b + 1) * d];
                        let r = offs[b] * d..offs[b + 1] * d;
                        for (dst, gr) in gy[r.clone()].chunks_mut(d).zip(g[r].chunks(d)) {
                            for j in 0..d {
                                dst[j] = gr[j] * gt[j];
                            }
                        }
                    }
                    out.push((*yid, gy));
                }
                if self.needs(*gate) {
                    let mut gg = vec![0.0; lens.len() * d];
                    for b in 0..lens.len() {
                        let acc = &mut gg[b * d..(b + 1) * d];
                        let r = offs[b] * d..offs[b + 1] * d;
                        for (gr, yr) in g[r.clone()].chunks(d).zip(yd[r].chunks(d)) {
                            for j in 0..d {
                                acc[j] += gr[j] * yr[j];
                            }
                        }
                    }
                    out.push((*gate, gg));
                }
            }
            Op::RotatePairs { x, rot } => {
                let mut gx = g.to_vec();
                rotate_in_place(&mut gx, node.value.cols(), rot, -1.0);
                out.push((*x, gx));
            }
            Op::Attention {
                q,
                k,
                v,
                lens,
                heads,
                probs,
            } => {
                let (qd, kd, vd) = (inp(*q), inp(*k), inp(*v));
                let d = node.value.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let offs = segment_offsets(lens);
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                let maxl = lens.iter().copied().max().unwrap_or(0);
                let mut dp = vec![0.0; maxl * maxl];
                let mut p_off = 0;
                for (si, &l) in lens.iter().enumerate() {
                    let o = offs[si];
                    for h in 0..*heads {
                        let p = &probs[p_off..p_off + l * l];
                        p_off += l * l;
                        let hv = View::row_major(o * d + h * dh, l, dh, d);
                        let dp = &mut dp[..l * l];
                        // dP = dO V^T ; dV = P^T dO
                        gemm(1.0, g, hv, vd, hv.t(), 0.0, dp, View::dense(l, l));
                        gemm(1.0, p, View::dense(l, l).t(), g, hv, 1.0, &mut gv, hv);
                        for (dr, pr) in dp.chunks_mut(l).zip(p.chunks(l)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for j in 0..l {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                        }
                        // dQ = scale dS K ; dK = scale dS^T Q
                        gemm(scale, dp, View::dense(l, l), kd, hv, 1.0, &mut gq, hv);
                        gemm(scale, dp, View::dense(l, l).t(), qd, hv, 1.0, &mut gk, hv);
                    }
                }
                for (id, gr) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.needs(id) {
                        out.push((id, gr));
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let t = &self.nodes[*table].value;
                let d = t.cols();
                let mut gt = vec![0.0; t.numel()];
                for (row, &i) in g.chunks(d).zip(idx) {
                    gt[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                out.push((*table, gt));
            }
            Op::SegmentMse { pred, target, lens } => {
                let (pd, td) = (inp(*pred), inp(*target));
                let c = self.nodes[*pred].value.cols();
                let offs = segment_offsets(lens);
                let nseg = lens.len() as f64;
                let mut gp = vec![0.0; pd.len()];
                for b in 0..lens.len() {
                    let coef = 2.0 * g[0] / (nseg * (lens[b] * c) as f64);
                    for j in offs[b] * c..offs[b + 1] * c {
                        gp[j] = coef * (pd[j] - td[j]);
                    }
                }
                if self.needs(*target) {
                    out.push((*target, gp.iter().map(|v| -v).collect()));
                }
                if self.needs(*pred) {
                    out.push((*pred, gp));
                }
            }
        }
        out
    }
}

fn rotate_in_place(data: &mut [f64], cols: usize, rot: &PairRotation, sign: f64) {
    let p = rot.pairs;
    for (r, row) in data.chunks_mut(cols).enumerate() {
        let (cs, sn) = (&rot.cos[r * p..(r + 1) * p], &rot.sin[r * p..(r + 1) * p]);
        for head in row.chunks_mut(2 * p) {
            for j in 0..p {
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                let (c, s) = (cs[j], sign * sn[j]);
                head[2 * j] = a * c - b * s;
                head[2 * j + 1] = a * s + b * c;
            }
        }
    }
}
