//! Deterministic synthetic corpus: renderable scenes, templated captions,
//! derived edit/perception pairs, and the attribute oracle.

pub mod caption;
pub mod dataset;
pub mod oracle;
pub mod render;
pub mod scene;
pub mod tasks;

pub use caption::{
    caption_scene, caption_scene_canonical, edit_instruction, grammar_vocabulary, parse_caption,
    EditKind, GRAMMAR_WORDS,
};
pub use dataset::{generate_dataset, load_dataset, Dataset, DatasetManifest, DatasetPlan};
pub use oracle::{attribute_indicator, attribute_match, oracle_parse, ParseResult, ATTRIBUTE_DIM};
pub use render::{
    background_only, edge_target, foreground_mask, object_footprint, render_scene,
    silhouette_target,
};
pub use scene::{
    all_single_object_specs, all_two_object_specs, sample_scene, Background, Color, Position,
    SceneObject, SceneSpec, Shape,
};
pub use tasks::{derive_task_pair, mutate_spec, TaskKind, TaskRecord};
