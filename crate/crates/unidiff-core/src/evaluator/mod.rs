//! Deterministic evaluation: oracle-based IC/PQ scoring, benchmark suites,
//! reports, and the alignment ablation harness.

pub mod ablation;
pub mod benchmark;
pub mod score;

pub use ablation::{ablation_variants, run_ablation, AblationTable, AblationVariant};
pub use benchmark::{
    apply_instruction, run_benchmark, Aggregate, EvalReport, GenerativeModel, NetworkModel,
    OracleRenderModel, SampleScore, Suite,
};
pub use score::{
    edit_flip_succeeded, overall_score, score_caption, score_edit, score_generation,
    score_perception, PerceptionKind,
};
