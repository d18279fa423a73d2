//! Procedural captioned scenes of simple colored shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::text::{COLORS, POSITIONS, SHAPES, SIZES};

/// Background gray on the [0, 1] scale.
pub const BACKGROUND: f64 = 0.65;
pub const SIZES_SUPPORTED: [usize; 3] = [16, 32, 64];
const SUPERSAMPLE: usize = 4;

pub fn color_rgb(name: &str) -> [f64; 3] {
    match name {
        "red" => [0.9, 0.15, 0.15],
        "green" => [0.15, 0.75, 0.2],
        "blue" => [0.15, 0.3, 0.9],
        "yellow" => [0.95, 0.85, 0.15],
        "white" => [1.0, 1.0, 1.0],
        "black" => [0.05, 0.05, 0.05],
        _ => [BACKGROUND; 3],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: usize,
    pub color: [f64; 3],
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Shape {
    /// Point-in-shape test in pixel coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy, r) = (x - self.cx, y - self.cy, self.radius);
        match SHAPES[self.kind] {
            "circle" => dx * dx + dy * dy <= r * r,
            "square" => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            "triangle" => {
                let t = (dy + r) / (1.8 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            _ => dx.abs() <= r && dy.abs() <= 0.35 * r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeScene {
    /// `[3, S, S]` in [-1, 1].
    pub image: Tensor,
    pub caption: String,
    pub seed: u64,
    pub primary: Shape,
}

/// Supersampled coverage of each shape, later shapes drawn over earlier.
pub fn rasterize(size: usize, shapes: &[Shape]) -> Tensor {
    let area = size * size;
    let mut rgb = vec![BACKGROUND; 3 * area];
    for shape in shapes {
        for y in 0..size {
            for x in 0..size {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        hits += shape.contains(px, py) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    let v = &mut rgb[c * area + y * size + x];
                    *v = (1.0 - a) * *v + a * shape.color[c];
                }
            }
        }
    }
    Tensor::from_fn(&[3, size, size], |i| 2.0 * rgb[i] - 1.0)
}

/// A scene holding only the background.
pub fn render_background(size: usize) -> Tensor {
    rasterize(size, &[])
}

fn anchor(position: &str) -> (f64, f64) {
    match position {
        "left" => (0.27, 0.5),
        "right" => (0.73, 0.5),
        "top" => (0.5, 0.27),
        "bottom" => (0.5, 0.73),
        _ => (0.5, 0.5),
    }
}

/// 1 to 3 shapes; the caption "size color shape position" describes the
/// primary shape, which is drawn last.
pub fn render_scene(seed: u64, size: usize) -> ShapeScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let distractors = rng.random_range(0..=2usize);
    let mut shapes = Vec::with_capacity(distractors + 1);
    for _ in 0..distractors {
        shapes.push(Shape {
            kind: rng.random_range(0..SHAPES.len()),
            color: color_rgb(COLORS[rng.random_range(0..COLORS.len())]),
            cx: rng.random_range(0.15..0.85) * s,
            cy: rng.random_range(0.15..0.85) * s,
            radius: 0.1 * s,
        });
    }
    let color = rng.random_range(0..COLORS.len());
    let kind = rng.random_range(0..SHAPES.len());
    let size_idx = rng.random_range(0..SIZES.len());
    let position = rng.random_range(0..POSITIONS.len());
    let (ax, ay) = anchor(POSITIONS[position]);
    let jx = rng.random_range(-0.04..0.04);
    let jy = rng.random_range(-0.04..0.04);
    let primary = Shape {
        kind,
        color: color_rgb(COLORS[color]),
        cx: (ax + jx) * s,
        cy: (ay + jy) * s,
        radius: if size_idx == 0 { 0.16 * s } else { 0.26 * s },
    };
    shapes.push(primary);
    ShapeScene {
        image: rasterize(size, &shapes),
        caption: format!(
            "{} {} {} {}",
            SIZES[size_idx], COLORS[color], SHAPES[kind], POSITIONS[position]
        ),
        seed,
        primary,
    }
}

/// Scenes whose seed is a multiple of 10 are held out from training.
pub fn is_held_out(seed: u64) -> bool {
    seed.is_multiple_of(10)
}

/// The `k`-th held-out scene seed.
pub fn held_out_seed(k: u64) -> u64 {
    10 * k
}

/// Maps any seed onto the training split.
pub fn training_seed(raw: u64) -> u64 {
    if is_held_out(raw) {
        raw.wrapping_add(1)
    } else {
        raw
    }
}
