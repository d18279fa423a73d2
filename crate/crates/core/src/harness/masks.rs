//! Irregular brush-stroke masks and centered square masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MaskConfig, MaskKind};
use crate::error::{Error, Result};
use crate::mask::MaskMetric;

pub const MAX_ROUNDS: usize = 100;

pub fn generate(spec: &MaskConfig, size: usize, seed: u64) -> Result<MaskMetric> {
    match spec.kind {
        MaskKind::Irregular => gen_irregular_mask(spec, size, seed),
        MaskKind::Center => gen_center_mask(spec.center_ratio, size),
    }
}

fn stamp(mask: &mut MaskMetric, cx: f64, cy: f64, radius: f64) {
    let size = mask.height() as isize;
    let r = radius.ceil() as isize;
    let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
    for y in (y0 - r).max(0)..=(y0 + r).min(size - 1) {
        for x in (x0 - r).max(0)..=(x0 + r).min(size - 1) {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= radius * radius {
                mask.set(y as usize, x as usize, true);
            }
        }
    }
}

/// A random walk of `walk_length` segments stamped with a round brush.
/// `scale` shrinks segment length and brush width.
fn add_stroke(mask: &mut MaskMetric, spec: &MaskConfig, rng: &mut ChaCha8Rng, scale: f64) {
    let s = mask.height() as f64;
    let mut x = rng.random_range(0.0..s);
    let mut y = rng.random_range(0.0..s);
    let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
    let width = rng.random_range(spec.brush_width_min..=spec.brush_width_max) as f64;
    let radius = (0.5 * width * scale).max(0.5);
    let step = (s / 10.0 * scale).max(1.0);
    stamp(mask, x, y, radius);
    for _ in 0..spec.walk_length {
        angle += rng.random_range(-0.9..0.9);
        let len = rng.random_range(0.5..1.0) * step;
        let n = (len / (0.5 * radius)).ceil().max(1.0) as usize;
        for k in 1..=n {
            let t = k as f64 / n as f64;
            stamp(mask, x + t * len * angle.cos(), y + t * len * angle.sin(), radius);
        }
        x = (x + len * angle.cos()).clamp(0.0, s - 1e-9);
        y = (y + len * angle.sin()).clamp(0.0, s - 1e-9);
    }
}

/// Union of random-walk strokes whose hole fraction lands in
/// `[ratio_lo, ratio_hi]`. A target fraction is drawn uniformly from the
/// bounds; strokes are added until it is reached, and a stroke that
/// overshoots the upper bound is undone and retried at half scale.
pub fn gen_irregular_mask(spec: &MaskConfig, size: usize, seed: u64) -> Result<MaskMetric> {
    let (lo, hi) = (spec.ratio_lo, spec.ratio_hi);
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return Err(Error::MaskGeneration(format!("invalid ratio bounds [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut mask = MaskMetric::valid(size, size);
    let mut scale = 1.0;
    for _ in 0..MAX_ROUNDS {
        let f = mask.invalid_fraction();
        if f >= target && f <= hi {
            return Ok(mask);
        }
        if f > hi {
            unreachable!("overshoot is undone before the next round");
        }
        let before = mask.clone();
        add_stroke(&mut mask, spec, &mut rng, scale);
        if mask.invalid_fraction() > hi {
            mask = before;
            scale *= 0.5;
        }
    }
    let f = mask.invalid_fraction();
    if (lo..=hi).contains(&f) {
        Ok(mask)
    } else {
        Err(Error::MaskGeneration(format!(
            "hole fraction {f:.3} outside [{lo}, {hi}] after {MAX_ROUNDS} rounds"
        )))
    }
}

/// Side of the centered square for a hole ratio.
pub fn center_side(ratio: f64, size: usize) -> usize {
    ((size as f64 * ratio.sqrt()).round() as usize).clamp(1, size)
}

pub fn gen_center_mask(ratio: f64, size: usize) -> Result<MaskMetric> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::MaskGeneration(format!("center ratio {ratio} must lie in (0, 1)")));
    }
    let side = center_side(ratio, size);
    let off = (size - side) / 2;
    let mut mask = MaskMetric::valid(size, size);
    for y in off..off + side {
        for x in off..off + side {
            mask.set(y, x, true);
        }
    }
    Ok(mask)
}
