//! The single shared-weight diffusion transformer and its checkpoint format.

pub mod checkpoint;
pub mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{
    forward, forward_on_graph, init_model, parameter_inventory, ForwardInputs, ForwardTrace,
    Mode, ModelConfig, TraceVars,
};
