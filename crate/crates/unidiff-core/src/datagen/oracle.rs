//! Deterministic image parser: the ground-truth reader behind the teacher
//! features and all evaluation scores.

use crate::tokenization::Image;

use super::scene::{
    Background, Color, Position, SceneObject, SceneSpec, Shape, BACKGROUNDS, POSITIONS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaletteEntry {
    Object(Color),
    Background(Background),
}

impl PaletteEntry {
    pub fn is_object(self) -> bool {
        matches!(self, PaletteEntry::Object(_))
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            PaletteEntry::Object(c) => c.rgb(),
            PaletteEntry::Background(b) => b.rgb(),
        }
    }
}

const PALETTE: [PaletteEntry; 7] = [
    PaletteEntry::Object(Color::Red),
    PaletteEntry::Object(Color::Green),
    PaletteEntry::Object(Color::Blue),
    PaletteEntry::Object(Color::Yellow),
    PaletteEntry::Background(Background::Black),
    PaletteEntry::Background(Background::White),
    PaletteEntry::Background(Background::Gray),
];

/// Nearest palette entry and the L2 distance to it.
pub fn nearest_palette(rgb: [f32; 3]) -> (PaletteEntry, f64) {
    let mut best = PALETTE[0];
    let mut best_d = f64::INFINITY;
    for &entry in &PALETTE {
        let p = entry.rgb();
        let d = (0..3)
            .map(|i| f64::from(rgb[i] - p[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        if d < best_d {
            best_d = d;
            best = entry;
        }
    }
    (best, best_d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseResult {
    pub spec: SceneSpec,
    /// Mean pixel-to-palette proximity in [0, 1]; 1.0 for exact renders.
    pub confidence: f64,
}

impl ParseResult {
    pub fn is_empty(&self) -> bool {
        self.spec.objects.is_empty()
    }
}

struct Component {
    color: Color,
    pixels: Vec<(usize, usize)>, // (y, x)
}

fn connected_components(classes: &[Option<Color>], h: usize, w: usize) -> Vec<Component> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        let Some(color) = classes[start] else { continue };
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            pixels.push((y, x));
            let mut visit = |ny: usize, nx: usize| {
                let j = ny * w + nx;
                if !seen[j] && classes[j] == Some(color) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
        }
        out.push(Component { color, pixels });
    }
    out
}

fn classify_shape(pixels: &[(usize, usize)]) -> Shape {
    let min_y = pixels.iter().map(|p| p.0).min().unwrap();
    let max_y = pixels.iter().map(|p| p.0).max().unwrap();
    let min_x = pixels.iter().map(|p| p.1).min().unwrap();
    let max_x = pixels.iter().map(|p| p.1).max().unwrap();
    let bbox = (max_y - min_y + 1) * (max_x - min_x + 1);
    let fill = pixels.len() as f64 / bbox as f64;
    if fill >= 0.9 {
        return Shape::Square;
    }
    let top_width = pixels.iter().filter(|p| p.0 == min_y).count() as f64;
    let bottom_width = pixels.iter().filter(|p| p.0 == max_y).count() as f64;
    if top_width / bottom_width <= 0.7 {
        Shape::Triangle
    } else {
        Shape::Circle
    }
}

fn classify_position(pixels: &[(usize, usize)], size: usize) -> Position {
    let n = pixels.len() as f64;
    let cy = pixels.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / n / size as f64;
    let cx = pixels.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / n / size as f64;
    let mut best = Position::Center;
    let mut best_d = f64::INFINITY;
    for &p in &POSITIONS {
        let (ax, ay) = p.anchor();
        let d = (cx - ax).powi(2) + (cy - ay).powi(2);
        if d < best_d {
            best_d = d;
            best = p;
        }
    }
    best
}

/// Parse an image into a scene: per-pixel nearest-palette classification,
/// connected components, fill-ratio shape statistics, nearest-anchor
/// positions. Works on renders and on model output.
pub fn oracle_parse(image: &Image) -> ParseResult {
    let (h, w) = (image.height, image.width);
    let mut classes: Vec<Option<Color>> = Vec::with_capacity(h * w);
    let mut bg_votes = [0usize; 3];
    let mut proximity_sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (entry, d) = nearest_palette(image.get(y, x));
            proximity_sum += (1.0 - d).max(0.0);
            match entry {
                PaletteEntry::Object(c) => classes.push(Some(c)),
                PaletteEntry::Background(b) => {
                    bg_votes[b.index()] += 1;
                    classes.push(None);
                }
            }
        }
    }
    let confidence = proximity_sum / (h * w) as f64;
    let background = BACKGROUNDS[bg_votes
        .iter()
        .enumerate()
        .max_by_key(|(i, &v)| (v, usize::MAX - i))
        .map(|(i, _)| i)
        .unwrap_or(0)];

    let min_area = (h * w / 100).max(4);
    let mut comps: Vec<Component> = connected_components(&classes, h, w)
        .into_iter()
        .filter(|c| c.pixels.len() >= min_area)
        .collect();
    comps.sort_by(|a, b| b.pixels.len().cmp(&a.pixels.len()).then(a.color.index().cmp(&b.color.index())));
    comps.truncate(2);

    if comps.is_empty() {
        return ParseResult {
            spec: SceneSpec::parsed(Vec::new(), background),
            confidence: if bg_votes.iter().sum::<usize>() == h * w { confidence } else { 0.0 },
        };
    }

    let objects: Vec<SceneObject> = comps
        .iter()
        .map(|c| SceneObject {
            shape: classify_shape(&c.pixels),
            color: c.color,
            position: classify_position(&c.pixels, h),
        })
        .collect();
    ParseResult { spec: SceneSpec::parsed(objects, background), confidence }
}

/// Multi-hot attribute indicator over the caption-visible basis:
/// shape (3) + color (4) + position (5). Not normalized.
pub const ATTRIBUTE_DIM: usize = 12;

pub fn attribute_indicator(objects: &[SceneObject]) -> [f64; ATTRIBUTE_DIM] {
    let mut v = [0.0; ATTRIBUTE_DIM];
    for o in objects {
        v[o.shape.index()] += 1.0;
        v[3 + o.color.index()] += 1.0;
        v[7 + o.position.index()] += 1.0;
    }
    v
}

/// Count of matched attributes between two object lists, pairing objects by
/// position order; the denominator is the attribute count of `target`.
pub fn attribute_match(parsed: &[SceneObject], target: &[SceneObject]) -> (usize, usize) {
    let total = target.len() * 3;
    let mut matched = 0;
    for (i, t) in target.iter().enumerate() {
        // best match against the positionally-paired parse, falling back to
        // any parsed object at the same position
        let candidate = parsed.get(i).or_else(|| {
            parsed.iter().find(|p| p.position == t.position)
        });
        if let Some(p) = candidate {
            matched += usize::from(p.shape == t.shape);
            matched += usize::from(p.color == t.color);
            matched += usize::from(p.position == t.position);
        }
    }
    (matched, total)
}
