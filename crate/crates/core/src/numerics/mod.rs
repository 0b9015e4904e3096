//! Dense fp64 tensors, a reverse-mode tape, and the elementary ops the
//! encoders are built from.

mod gradcheck;
mod params;
mod pass;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GradEntry};
pub use params::{glorot, ones_with_noise, ParamId, ParamStore};
pub use pass::Pass;
pub use tape::{softmax_groups, Gradients, Segments, Tape, Var};
pub use tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
