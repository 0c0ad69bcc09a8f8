use serde::{Deserialize, Serialize};

use crate::numerics::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
    Center,
}

pub const POSITIONS: [Position; 5] =
    [Position::Left, Position::Right, Position::Top, Position::Bottom, Position::Center];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Black,
    White,
    Gray,
}

pub const BACKGROUNDS: [Background; 3] = [Background::Black, Background::White, Background::Gray];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        SHAPES.iter().copied().find(|s| s.word() == w)
    }

    pub fn index(self) -> usize {
        SHAPES.iter().position(|&s| s == self).unwrap()
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        COLORS.iter().copied().find(|c| c.word() == w)
    }

    pub fn index(self) -> usize {
        COLORS.iter().position(|&c| c == self).unwrap()
    }

    /// Palette value as stored bytes; float pixels are byte/255*2-1 exactly,
    /// so rendered colors survive the dataset byte codec bit-exactly.
    pub fn rgb_bytes(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        bytes_to_rgb(self.rgb_bytes())
    }
}

impl Background {
    pub fn word(self) -> &'static str {
        match self {
            Background::Black => "black",
            Background::White => "white",
            Background::Gray => "gray",
        }
    }

    pub fn index(self) -> usize {
        BACKGROUNDS.iter().position(|&b| b == self).unwrap()
    }

    pub fn rgb_bytes(self) -> [u8; 3] {
        match self {
            Background::Black => [0, 0, 0],
            Background::White => [255, 255, 255],
            Background::Gray => [128, 128, 128],
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        bytes_to_rgb(self.rgb_bytes())
    }
}

impl Position {
    pub fn word(self) -> &'static str {
        match self {
            Position::Left => "left",
            Position::Right => "right",
            Position::Top => "top",
            Position::Bottom => "bottom",
            Position::Center => "center",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        POSITIONS.iter().copied().find(|p| p.word() == w)
    }

    pub fn index(self) -> usize {
        POSITIONS.iter().position(|&p| p == self).unwrap()
    }

    /// Anchor point in unit coordinates (x right, y down). 3/16 offsets keep
    /// integer pixel centers at both supported sizes and leave a clean gap
    /// between neighbouring object footprints.
    pub fn anchor(self) -> (f64, f64) {
        match self {
            Position::Left => (0.1875, 0.5),
            Position::Right => (0.8125, 0.5),
            Position::Top => (0.5, 0.1875),
            Position::Bottom => (0.5, 0.8125),
            Position::Center => (0.5, 0.5),
        }
    }
}

pub fn bytes_to_rgb(b: [u8; 3]) -> [f32; 3] {
    [
        f32::from(b[0]) / 255.0 * 2.0 - 1.0,
        f32::from(b[1]) / 255.0 * 2.0 - 1.0,
        f32::from(b[2]) / 255.0 * 2.0 - 1.0,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
}

/// Symbolic ground truth of one synthetic image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background: Background,
}

impl SceneSpec {
    /// Construct, sorting objects into canonical position order. Panics in
    /// debug builds if two objects share a position.
    pub fn new(mut objects: Vec<SceneObject>, background: Background) -> Self {
        debug_assert!(!objects.is_empty() && objects.len() <= 2);
        objects.sort_by_key(|o| o.position.index());
        if objects.len() == 2 {
            debug_assert_ne!(objects[0].position, objects[1].position);
        }
        SceneSpec { objects, background }
    }

    /// For parser output only: no invariant enforcement beyond sorting.
    pub fn parsed(mut objects: Vec<SceneObject>, background: Background) -> Self {
        objects.sort_by_key(|o| o.position.index());
        SceneSpec { objects, background }
    }
}

/// Uniform over object count, then uniform within the class; two objects
/// never share a position.
pub fn sample_scene(rng: &mut RngState) -> SceneSpec {
    let background = BACKGROUNDS[rng.below(3)];
    let count = 1 + rng.below(2);
    let first = SceneObject {
        shape: SHAPES[rng.below(3)],
        color: COLORS[rng.below(4)],
        position: POSITIONS[rng.below(5)],
    };
    let mut objects = vec![first];
    if count == 2 {
        let rest: Vec<Position> =
            POSITIONS.iter().copied().filter(|&p| p != first.position).collect();
        objects.push(SceneObject {
            shape: SHAPES[rng.below(3)],
            color: COLORS[rng.below(4)],
            position: rest[rng.below(rest.len())],
        });
    }
    SceneSpec::new(objects, background)
}

/// Every single-object spec, for exhaustive checks.
pub fn all_single_object_specs() -> Vec<SceneSpec> {
    let mut out = Vec::new();
    for &background in &BACKGROUNDS {
        for &shape in &SHAPES {
            for &color in &COLORS {
                for &position in &POSITIONS {
                    out.push(SceneSpec::new(
                        vec![SceneObject { shape, color, position }],
                        background,
                    ));
                }
            }
        }
    }
    out
}

/// Every two-object spec (unordered position pairs), for exhaustive checks.
pub fn all_two_object_specs() -> Vec<SceneSpec> {
    let mut out = Vec::new();
    for &background in &BACKGROUNDS {
        for (i, &p1) in POSITIONS.iter().enumerate() {
            for &p2 in &POSITIONS[i + 1..] {
                for &s1 in &SHAPES {
                    for &c1 in &COLORS {
                        for &s2 in &SHAPES {
                            for &c2 in &COLORS {
                                out.push(SceneSpec::new(
                                    vec![
                                        SceneObject { shape: s1, color: c1, position: p1 },
                                        SceneObject { shape: s2, color: c2, position: p2 },
                                    ],
                                    background,
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_reproduces_scene() {
        let mut a = RngState::new(7);
        let mut b = RngState::new(7);
        for _ in 0..50 {
            assert_eq!(sample_scene(&mut a), sample_scene(&mut b));
        }
    }

    #[test]
    fn no_duplicate_positions_ever() {
        let mut rng = RngState::new(123);
        for _ in 0..20_000 {
            let s = sample_scene(&mut rng);
            if s.objects.len() == 2 {
                assert_ne!(s.objects[0].position, s.objects[1].position);
            }
        }
    }

    #[test]
    fn shape_frequencies_uniform_within_3_sigma() {
        let mut rng = RngState::new(99);
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for _ in 0..10_000 {
            for o in sample_scene(&mut rng).objects {
                counts[o.shape.index()] += 1;
                total += 1;
            }
        }
        let p = 1.0 / 3.0;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - total as f64 * p).abs() <= 3.0 * sigma,
                "count {c} of {total}"
            );
        }
    }

    #[test]
    fn exhaustive_spec_counts() {
        assert_eq!(all_single_object_specs().len(), 3 * 3 * 4 * 5);
        assert_eq!(all_two_object_specs().len(), 3 * 10 * 12 * 12);
    }
}
