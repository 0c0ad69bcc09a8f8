//! Dense tensor kernels, reverse-mode differentiation, AdamW, and the
//! finite-difference gradient checker.

pub mod adamw;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use gradcheck::{check_all_kernels, check_kernel, finite_diff_gradcheck, GradcheckReport};
pub use graph::{Graph, Kernel, Var};
pub use params::{forward_backward, BoundParams, GradMap, ParameterStore};
pub use rng::RngState;
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
