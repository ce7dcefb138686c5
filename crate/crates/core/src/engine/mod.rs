//! Dense tensors and a reverse-mode differentiation tape.

mod tape;
mod tensor;

pub use tape::{BinaryKind, Gradients, MacCounters, ReduceKind, Tape, Var};
pub use tensor::{Scalar, Tensor};

pub(crate) use tape::sigmoid;

/// Normalization stability constant.
pub const NORM_EPS: f64 = 1e-5;
