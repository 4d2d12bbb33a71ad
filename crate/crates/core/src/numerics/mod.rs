//! Dense tensors, reverse-mode differentiation and gradient checking.

mod grad_check;
pub mod layers;
mod params;
mod tape;
mod tensor;

pub use grad_check::{grad_check, relative_error, GradCheckReport, DEFAULT_STEP, DEFAULT_TOL};
pub use layers::{linear, msa_weight_encoding, BatchNorm, GroupedLinear, Linear, Mlp2};
pub use params::{Param, ParamId, Params};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
