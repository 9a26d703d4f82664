//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! 64-bit floats throughout; the tape is explicit and per-forward-pass, and
//! tracked tensors are never mutated in place.

pub mod check;
pub mod params;
pub mod tape;

pub use check::{finite_diff_check, per_op_suite, CheckReport, GroupReport};
pub use params::{Affine, Mlp, ParamArray, ParamBinding, ParamStore};
pub use tape::{matmul_into, set_backward_corruption, Tape, Tensor, TensorId};
