//! Total objective, dual-pass training step, hybrid batch sampling, and the
//! multi-stage schedule.

pub mod batch;
pub mod config;
pub mod harness;
pub mod stage;
pub mod step;

pub use batch::{
    build_sample, hybrid_batch_sample, Batch, BatchSample, CorruptionStreams, DataPools,
    SamplerState,
};
pub use config::{DatasetSpec, RunConfig, SampleConfig, StageSpec, TrainConfig};
pub use stage::{load_stage_pools, read_metrics, run_pipeline, run_stage, MetricsLine};
pub use step::{
    batch_loss_graph, batch_loss_graph_kind, compute_grads, training_step, LossBreakdown,
    LossKind, StepOutput,
};
