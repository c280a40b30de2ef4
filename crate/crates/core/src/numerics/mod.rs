//! Dense tensors, reverse-mode differentiation, sampling kernels, and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod linalg;
pub mod nn;
pub mod ops;
pub mod sample;
pub mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradReport};
pub use nn::{Graph, LayerNorm, LinearLayer, ParamId, ParamStore, Rng};
pub use ops::softmax_rows;
pub use tape::{Backward, BackwardCtx, Gradients, Tape, Var};
pub use tensor::Tensor;
