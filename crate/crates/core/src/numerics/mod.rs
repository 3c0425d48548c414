//! Dense `f64` tensors, tape-based reverse-mode differentiation, AdamW and a
//! central-difference gradient oracle.

mod adamw;
mod gemm;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::{finite_diff_grad, relative_error, tape_grads, tape_numeric_grads};
pub use params::ParamSet;
pub use tape::{PairRotation, Tape, Var};
pub use tensor::Tensor;
