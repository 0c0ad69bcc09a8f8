//! Task pair derivation: editing mutates exactly one attribute, perception
//! targets are deterministic functions of source pixels.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::RngState;
use crate::tokenization::Image;

use super::caption::{caption_scene, caption_scene_canonical, edit_instruction, EditKind};
use super::render::{edge_target, render_scene, silhouette_target};
use super::scene::{SceneSpec, COLORS, POSITIONS, SHAPES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    T2i,
    I2t,
    Edit,
    Perception,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::T2i => "t2i",
            TaskKind::I2t => "i2t",
            TaskKind::Edit => "edit",
            TaskKind::Perception => "perception",
        }
    }
}

/// One training example; `source` present only for conditional tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task: TaskKind,
    pub instruction: String,
    pub caption: String,
    pub source: Option<Image>,
    pub target: Image,
    pub spec: SceneSpec,
    pub spec_target: Option<SceneSpec>,
}

/// Mutate exactly one attribute of one object; position edits avoid the
/// other object's slot. When both objects share shape and color the
/// instruction "the {color} {shape}" is ambiguous; the convention is that it
/// addresses the first object in position order.
pub fn mutate_spec(spec: &SceneSpec, rng: &mut RngState) -> (SceneSpec, String, EditKind) {
    let mut idx = rng.below(spec.objects.len());
    let ambiguous = spec.objects.len() == 2
        && spec.objects[0].shape == spec.objects[1].shape
        && spec.objects[0].color == spec.objects[1].color;
    if ambiguous {
        idx = 0;
    }
    let old = spec.objects[idx];
    let kind = match rng.below(3) {
        0 => EditKind::Color,
        1 => EditKind::Shape,
        _ => EditKind::Position,
    };
    let mut new = old;
    match kind {
        EditKind::Color => {
            let choices: Vec<_> = COLORS.iter().copied().filter(|&c| c != old.color).collect();
            new.color = choices[rng.below(choices.len())];
        }
        EditKind::Shape => {
            let choices: Vec<_> = SHAPES.iter().copied().filter(|&s| s != old.shape).collect();
            new.shape = choices[rng.below(choices.len())];
        }
        EditKind::Position => {
            let taken: Vec<_> = spec.objects.iter().map(|o| o.position).collect();
            let choices: Vec<_> =
                POSITIONS.iter().copied().filter(|p| !taken.contains(p)).collect();
            new.position = choices[rng.below(choices.len())];
        }
    }
    let mut objects = spec.objects.clone();
    objects[idx] = new;
    let edited = SceneSpec::new(objects, spec.background);
    (edited, edit_instruction(&old, &new, kind), kind)
}

pub fn derive_task_pair(
    spec: &SceneSpec,
    task: TaskKind,
    size: usize,
    rng: &mut RngState,
) -> Result<TaskRecord> {
    match task {
        TaskKind::T2i | TaskKind::I2t => {
            let caption = caption_scene(spec, rng);
            let target = render_scene(spec, size)?;
            Ok(TaskRecord {
                task,
                instruction: caption.clone(),
                caption,
                source: None,
                target,
                spec: spec.clone(),
                spec_target: Some(spec.clone()),
            })
        }
        TaskKind::Edit => {
            let (edited, instruction, _) = mutate_spec(spec, rng);
            let source = render_scene(spec, size)?;
            let target = render_scene(&edited, size)?;
            let caption = caption_scene(&edited, rng);
            Ok(TaskRecord {
                task,
                instruction,
                caption,
                source: Some(source),
                target,
                spec: spec.clone(),
                spec_target: Some(edited),
            })
        }
        TaskKind::Perception => {
            let source = render_scene(spec, size)?;
            let (instruction, target) = if rng.below(2) == 0 {
                ("edge map".to_string(), edge_target(&source))
            } else {
                ("silhouette".to_string(), silhouette_target(&source))
            };
            // the map depicts the source scene; its caption describes that scene
            let caption = caption_scene_canonical(spec);
            Ok(TaskRecord {
                task,
                instruction,
                caption,
                source: Some(source),
                target,
                spec: spec.clone(),
                spec_target: None,
            })
        }
    }
}
