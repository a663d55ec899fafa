//! Minimal dense-array numerics: tensors, 2-D convolution, momentum SGD, and
//! finite-difference gradient verification. Everything downstream routes its
//! forward/backward math through these primitives.

pub mod conv;
pub mod gradcheck;
pub mod real;
pub mod sgd;
pub mod tensor;

pub use conv::{conv2d, conv2d_backward, reflect_index, PadMode};
pub use gradcheck::{finite_diff_check, DEFAULT_EPS, DEFAULT_TOL};
pub use real::Real;
pub use sgd::{sgd_step, sgd_step_refs, SgdState};
pub use tensor::Tensor;
