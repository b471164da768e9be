//! Dense tensors, reverse-mode differentiation and seeded randomness.

mod gradcheck;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, rel_err, GradCheck};
pub use rng::{Rng, RngState};
pub use scalar::Scalar;
pub use tape::{Grads, Segment, Tape, Var};
pub(crate) use tape::softmax_rows_in_place;
pub use tensor::Tensor;
