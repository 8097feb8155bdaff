//! Dense `f64` tensors with a dynamic reverse-mode tape.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport, ParamCheck, MAX_EPS, MIN_EPS};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Fault, Gradients, ParamGrad, Tape, UnaryKind, Var};
pub use tensor::Tensor;
