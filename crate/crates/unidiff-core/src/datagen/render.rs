//! Palette renderer and the derived perception targets. No anti-aliasing:
//! every pixel is exactly a palette color, so the oracle can invert renders.

use crate::error::{Error, Result};
use crate::tokenization::Image;

use super::scene::{Background, SceneObject, SceneSpec, Shape};

/// Object half-extent in unit coordinates.
const RADIUS_FRAC: f64 = 0.125;

fn inside(obj: &SceneObject, size: usize, x: usize, y: usize) -> bool {
    let (ax, ay) = obj.position.anchor();
    let cx = ax * size as f64;
    let cy = ay * size as f64;
    let r = RADIUS_FRAC * size as f64;
    let px = x as f64 + 0.5;
    let py = y as f64 + 0.5;
    let dx = px - cx;
    let dy = py - cy;
    match obj.shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs().max(dy.abs()) <= r * 0.8,
        Shape::Triangle => {
            // upward triangle: apex at cy - r, base at cy + r
            dy.abs() <= r && dx.abs() <= (dy + r) / 2.0
        }
    }
}

pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<Image> {
    if size != 16 && size != 32 {
        return Err(Error::config("render.size", format!("size {size} not in {{16, 32}}")));
    }
    let mut img = Image::filled(size, size, spec.background.rgb());
    for y in 0..size {
        for x in 0..size {
            // later objects draw over earlier ones; positions never overlap anyway
            for obj in &spec.objects {
                if inside(obj, size, x, y) {
                    img.set(y, x, obj.color.rgb());
                }
            }
        }
    }
    Ok(img)
}

/// Foreground mask computed from pixels: true where the nearest palette color
/// is an object color rather than a background color.
pub fn foreground_mask(image: &Image) -> Vec<bool> {
    use super::oracle::nearest_palette;
    let mut mask = vec![false; image.height * image.width];
    for y in 0..image.height {
        for x in 0..image.width {
            let (entry, _) = nearest_palette(image.get(y, x));
            mask[y * image.width + x] = entry.is_object();
        }
    }
    mask
}

/// Silhouette target: +1 foreground, -1 background, all three channels.
pub fn silhouette_target(source: &Image) -> Image {
    let mask = foreground_mask(source);
    let mut out = Image::filled(source.height, source.width, [-1.0, -1.0, -1.0]);
    for y in 0..source.height {
        for x in 0..source.width {
            if mask[y * source.width + x] {
                out.set(y, x, [1.0, 1.0, 1.0]);
            }
        }
    }
    out
}

/// Edge target: Sobel magnitude of the foreground mask, binarized, restricted
/// to foreground pixels — the inner one-pixel boundary ring.
pub fn edge_target(source: &Image) -> Image {
    let (h, w) = (source.height, source.width);
    let mask = foreground_mask(source);
    let m = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            f64::from(u8::from(mask[y as usize * w + x as usize]))
        }
    };
    let mut out = Image::filled(h, w, [-1.0, -1.0, -1.0]);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !mask[y as usize * w + x as usize] {
                continue;
            }
            let gx = -m(y - 1, x - 1) - 2.0 * m(y, x - 1) - m(y + 1, x - 1)
                + m(y - 1, x + 1)
                + 2.0 * m(y, x + 1)
                + m(y + 1, x + 1);
            let gy = -m(y - 1, x - 1) - 2.0 * m(y - 1, x) - m(y - 1, x + 1)
                + m(y + 1, x - 1)
                + 2.0 * m(y + 1, x)
                + m(y + 1, x + 1);
            if (gx * gx + gy * gy).sqrt() >= 1.0 {
                out.set(y as usize, x as usize, [1.0, 1.0, 1.0]);
            }
        }
    }
    out
}

/// Pixels within the drawable footprint of an object (bounding disc with a
/// safety margin), used for edit-locality scoring.
pub fn object_footprint(obj: &SceneObject, size: usize) -> Vec<bool> {
    let (ax, ay) = obj.position.anchor();
    let cx = ax * size as f64;
    let cy = ay * size as f64;
    let r = RADIUS_FRAC * size as f64 * 1.5;
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                mask[y * size + x] = true;
            }
        }
    }
    mask
}

pub fn background_only(background: Background, size: usize) -> Image {
    Image::filled(size, size, background.rgb())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::scene::{Color, Position, SceneObject};

    fn spec_one(shape: Shape, color: Color, position: Position, bg: Background) -> SceneSpec {
        SceneSpec::new(vec![SceneObject { shape, color, position }], bg)
    }

    #[test]
    fn center_pixel_of_centered_red_circle_is_exact_palette_red() {
        let spec = spec_one(Shape::Circle, Color::Red, Position::Center, Background::Black);
        let img = render_scene(&spec, 16).unwrap();
        assert_eq!(img.get(8, 8), Color::Red.rgb());
        assert_eq!(img.get(0, 0), Background::Black.rgb());
    }

    #[test]
    fn background_only_spec_is_all_background() {
        let img = background_only(Background::Gray, 16);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(img.get(y, x), Background::Gray.rgb());
            }
        }
    }

    #[test]
    fn rejects_unsupported_size() {
        let spec = spec_one(Shape::Circle, Color::Red, Position::Center, Background::Black);
        assert!(render_scene(&spec, 20).is_err());
    }

    #[test]
    fn palette_survives_byte_codec() {
        let spec = spec_one(Shape::Square, Color::Yellow, Position::Left, Background::Gray);
        let img = render_scene(&spec, 16).unwrap();
        let back = Image::from_bytes(16, 16, &img.to_bytes()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn edge_map_of_square_is_exactly_the_boundary_ring() {
        let spec = spec_one(Shape::Square, Color::Blue, Position::Center, Background::Black);
        let img = render_scene(&spec, 16).unwrap();
        let mask = foreground_mask(&img);
        let edges = edge_target(&img);
        #[allow(clippy::needless_range_loop)]
        for y in 0..16usize {
            for x in 0..16usize {
                let fg = mask[y * 16 + x];
                // interior = fg pixel whose 4-neighbours are all fg
                let interior = fg
                    && [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)]
                        .iter()
                        .all(|&(ny, nx)| {
                            ny < 16 && nx < 16 && mask[ny * 16 + nx]
                        });
                let edge = edges.get(y, x) == [1.0, 1.0, 1.0];
                if interior {
                    assert!(!edge, "interior ({y},{x}) marked as edge");
                }
                if fg && !interior {
                    assert!(edge, "ring pixel ({y},{x}) missing");
                }
                if !fg {
                    assert!(!edge, "background ({y},{x}) marked as edge");
                }
            }
        }
    }

    #[test]
    fn silhouette_equals_foreground_mask() {
        let spec = spec_one(Shape::Triangle, Color::Green, Position::Top, Background::White);
        let img = render_scene(&spec, 32).unwrap();
        let mask = foreground_mask(&img);
        let sil = silhouette_target(&img);
        for y in 0..32 {
            for x in 0..32 {
                let want = if mask[y * 32 + x] { [1.0, 1.0, 1.0] } else { [-1.0, -1.0, -1.0] };
                assert_eq!(sil.get(y, x), want);
            }
        }
    }
}
