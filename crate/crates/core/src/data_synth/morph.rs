//! Binary morphology with disk structuring elements.

use rand::Rng as _;

use crate::image::Mask;
use crate::rng::{self, tag};

/// Offsets `(dy, dx)` with `dy² + dx² ≤ r²`. Radius 1 is the 4-connected plus.
pub fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn on(mask: &Mask, y: i64, x: i64) -> Option<bool> {
    if y < 0 || x < 0 || y >= mask.height as i64 || x >= mask.width as i64 {
        None
    } else {
        Some(mask.data[y as usize * mask.width + x as usize] >= 0.5)
    }
}

/// Dilation: a pixel is set when any disk neighbour is set.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offs = disk_offsets(radius);
    let mut out = Mask::mask(mask.height, mask.width);
    for y in 0..mask.height as i64 {
        for x in 0..mask.width as i64 {
            let hit = offs
                .iter()
                .any(|&(dy, dx)| on(mask, y + dy, x + dx) == Some(true));
            if hit {
                out.data[y as usize * mask.width + x as usize] = 1.0;
            }
        }
    }
    out
}

/// Erosion: a pixel survives only when every in-bounds disk neighbour is set.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offs = disk_offsets(radius);
    let mut out = Mask::mask(mask.height, mask.width);
    for y in 0..mask.height as i64 {
        for x in 0..mask.width as i64 {
            let keep = offs
                .iter()
                .all(|&(dy, dx)| on(mask, y + dy, x + dx) != Some(false));
            if keep && on(mask, y, x) == Some(true) {
                out.data[y as usize * mask.width + x as usize] = 1.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Dilate(usize),
    Erode(usize),
}

/// The operation `augment_mask` applies for a given seed.
pub fn draw_morph(seed: u64, r_max: usize) -> MorphOp {
    let mut r = rng::rng_from(seed, &[tag::MASK_AUG]);
    let dilate: bool = r.random();
    let radius = r.random_range(0..=r_max);
    if dilate {
        MorphOp::Dilate(radius)
    } else {
        MorphOp::Erode(radius)
    }
}

/// Random dilation or erosion with radius in `[0, r_max]`, both drawn from `seed`.
pub fn augment_mask(mask: &Mask, seed: u64, r_max: usize) -> Mask {
    match draw_morph(seed, r_max) {
        MorphOp::Dilate(r) => dilate(mask, r),
        MorphOp::Erode(r) => erode(mask, r),
    }
}
