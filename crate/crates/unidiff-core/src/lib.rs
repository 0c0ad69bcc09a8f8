//! Unified dual-stream diffusion transformer: one shared-weight model for
//! image generation (flow matching), caption generation (masked discrete
//! diffusion), instruction-based editing, and perception, trained with
//! cross-modal and intrinsic-modal semantic alignment losses.
//!
//! The numeric core is generic over the scalar type (`f32` for training,
//! `f64` for gradient checking); concrete aliases live at the crate root.

pub mod error;
pub mod evaluator;
pub mod instrument;
pub mod alignment;
pub mod backbone;
pub mod datagen;
pub mod diffusion;
pub mod numerics;
pub mod sampler;
pub mod tokenization;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Graph, ParameterStore, RngState, Scalar, Tensor, Var};

/// 32-bit training aliases.
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph32 = numerics::Graph<f32>;
pub type ParameterStore32 = numerics::ParameterStore<f32>;

/// 64-bit gradcheck aliases.
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph64 = numerics::Graph<f64>;
pub type ParameterStore64 = numerics::ParameterStore<f64>;
