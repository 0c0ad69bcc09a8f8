//! Templated caption grammar, instruction templates, and their parser.

use crate::numerics::RngState;

use super::scene::{Color, Position, SceneObject, SceneSpec, Shape};

/// Every word the caption/instruction grammar can emit; the vocabulary is
/// built from exactly this list.
pub const GRAMMAR_WORDS: [&str; 23] = [
    "a", "and", "blue", "bottom", "center", "change", "circle", "edge", "green", "is", "left",
    "map", "move", "on", "red", "right", "silhouette", "square", "the", "to", "top", "triangle",
    "yellow",
];

pub fn grammar_vocabulary() -> crate::tokenization::Vocabulary {
    crate::tokenization::Vocabulary::from_words(GRAMMAR_WORDS)
}

fn object_phrase(o: &SceneObject) -> String {
    format!("a {} {} on the {}", o.color.word(), o.shape.word(), o.position.word())
}

fn object_phrase_variant(o: &SceneObject) -> String {
    format!("on the {} is a {} {}", o.position.word(), o.color.word(), o.shape.word())
}

/// Canonical template; objects in position order.
pub fn caption_scene_canonical(spec: &SceneSpec) -> String {
    spec.objects.iter().map(object_phrase).collect::<Vec<_>>().join(" and ")
}

/// One of the grammar templates, drawn at random.
pub fn caption_scene(spec: &SceneSpec, rng: &mut RngState) -> String {
    if rng.below(2) == 0 {
        caption_scene_canonical(spec)
    } else {
        spec.objects.iter().map(object_phrase_variant).collect::<Vec<_>>().join(" and ")
    }
}

/// Parse any grammar-generated caption back into its objects (position
/// order). Returns an empty list for text the grammar cannot produce.
pub fn parse_caption(text: &str) -> Vec<SceneObject> {
    let lowered = text.to_lowercase();
    let mut objects = Vec::new();
    for clause in lowered.split(" and ") {
        let words: Vec<&str> = clause.split_whitespace().collect();
        let mut shape = None;
        let mut color = None;
        let mut position = None;
        for w in words {
            if let Some(s) = Shape::from_word(w) {
                shape.get_or_insert(s);
            } else if let Some(c) = Color::from_word(w) {
                color.get_or_insert(c);
            } else if let Some(p) = Position::from_word(w) {
                position.get_or_insert(p);
            }
        }
        if let (Some(shape), Some(color), Some(position)) = (shape, color, position) {
            objects.push(SceneObject { shape, color, position });
        }
    }
    objects.sort_by_key(|o| o.position.index());
    objects.truncate(2);
    objects
}

/// Which attribute an edit instruction changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Color,
    Shape,
    Position,
}

pub fn edit_instruction(old: &SceneObject, new: &SceneObject, kind: EditKind) -> String {
    match kind {
        EditKind::Color => format!(
            "change the {} {} to {}",
            old.color.word(),
            old.shape.word(),
            new.color.word()
        ),
        EditKind::Shape => format!(
            "change the {} {} to a {}",
            old.color.word(),
            old.shape.word(),
            new.shape.word()
        ),
        EditKind::Position => format!(
            "move the {} {} to the {}",
            old.color.word(),
            old.shape.word(),
            new.position.word()
        ),
    }
}
