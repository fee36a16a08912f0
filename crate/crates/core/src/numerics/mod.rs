//! Dense `f64` tensors, reverse-mode differentiation and seeded randomness.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use rng::{sample_standard_normal, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
