//! Pseudo-warp: an elastic displacement followed by Gaussian blur, used to
//! fabricate an imperfectly warped garment from the garment on the body.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data_synth::morph;
use crate::filters;
use crate::image::{Image, Mask};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpParams {
    /// RMS displacement in pixels at strength 1.
    pub alpha_base: f64,
    /// Smoothing applied to the per-pixel displacement noise.
    pub sigma_smooth: f64,
    pub blur_min: f64,
    pub blur_max: f64,
    /// The warped mask never leaves the source mask dilated by this radius.
    pub mask_tolerance: usize,
}

impl Default for WarpParams {
    fn default() -> Self {
        Self {
            alpha_base: 3.0,
            sigma_smooth: 4.0,
            blur_min: 0.5,
            blur_max: 1.5,
            mask_tolerance: 2,
        }
    }
}

/// Per-pixel backward displacement `(dx, dy)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            dx: vec![0.0; height * width],
            dy: vec![0.0; height * width],
        }
    }

    pub fn mean_abs_displacement(&self) -> f64 {
        let n = self.dx.len().max(1) as f64;
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .sum::<f64>()
            / n
    }
}

fn rescale_rms(v: &mut [f64], target: f64) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x *= target / rms);
    }
}

/// Smoothed Gaussian noise rescaled to RMS `strength · alpha_base`.
pub fn displacement_field(
    height: usize,
    width: usize,
    seed: u64,
    strength: f64,
    params: &WarpParams,
) -> DisplacementField {
    let alpha = strength * params.alpha_base;
    if alpha == 0.0 {
        return DisplacementField::zeros(height, width);
    }
    let mut r = rng::rng_from(seed, &[tag::WARP]);
    let taps = filters::gaussian_kernel(params.sigma_smooth);
    let mut dx = filters::separable_f64(&rng::normal_vec_f64(&mut r, height * width), height, width, &taps);
    let mut dy = filters::separable_f64(&rng::normal_vec_f64(&mut r, height * width), height, width, &taps);
    rescale_rms(&mut dx, alpha);
    rescale_rms(&mut dy, alpha);
    DisplacementField {
        height,
        width,
        dx,
        dy,
    }
}

/// Bilinear backward resampling `out(y, x) = in(y + dy, x + dx)`, zero outside.
pub fn resample(img: &Image, field: &DisplacementField) -> Image {
    let (h, w, c) = img.dims();
    let mut out = Image::zeros(h, w, c);
    let fetch = |yy: i64, xx: i64, ch: usize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            img.get(yy as usize, xx as usize, ch) as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = y as f64 + field.dy[i];
            let sx = x as f64 + field.dx[i];
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let (y0, x0) = (y0 as i64, x0 as i64);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * fetch(y0, x0, ch) + fx * fetch(y0, x0 + 1, ch))
                    + fy * ((1.0 - fx) * fetch(y0 + 1, x0, ch) + fx * fetch(y0 + 1, x0 + 1, ch));
                out.set(y, x, ch, v as f32);
            }
        }
    }
    out
}

/// Warps `image` and its content `mask` with one shared elastic field, then
/// blurs the image. `strength = 0` returns both inputs unchanged.
pub fn pseudo_warp(
    image: &Image,
    mask: &Mask,
    seed: u64,
    strength: f64,
    params: &WarpParams,
) -> (Image, Mask) {
    assert!(strength >= 0.0, "warp strength must be non-negative");
    if strength == 0.0 {
        return (image.clone(), mask.clone());
    }
    let field = displacement_field(image.height, image.width, seed, strength, params);
    let warped = resample(image, &field);
    let soft = resample(mask, &field);
    let limit = morph::dilate(mask, params.mask_tolerance);
    let mut wmask = Mask::mask(mask.height, mask.width);
    for (i, v) in wmask.data.iter_mut().enumerate() {
        if soft.data[i] >= 0.5 && limit.data[i] >= 0.5 {
            *v = 1.0;
        }
    }
    let mut r = rng::rng_from(seed, &[tag::WARP, 1]);
    let sigma = r.random_range(params.blur_min..=params.blur_max);
    let blurred = filters::gaussian_blur(&warped, sigma).masked(&wmask);
    let mut clamped = blurred;
    clamped.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    (clamped, wmask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_vec(h, w, 1, (0..h * w).map(|i| i as f32 / (h * w) as f32).collect()).unwrap()
    }

    #[test]
    fn zero_strength_is_identity() {
        let img = ramp(8, 8);
        let m = Mask::filled(8, 8, 1, 1.0);
        let (a, b) = pseudo_warp(&img, &m, 3, 0.0, &WarpParams::default());
        assert_eq!(a, img);
        assert_eq!(b, m);
    }

    #[test]
    fn zero_field_resample_is_identity() {
        let img = ramp(5, 7);
        assert_eq!(resample(&img, &DisplacementField::zeros(5, 7)), img);
    }

    #[test]
    fn field_rms_matches_alpha() {
        let p = WarpParams::default();
        let f = displacement_field(64, 48, 11, 1.0, &p);
        let rms = (f.dx.iter().map(|v| v * v).sum::<f64>() / f.dx.len() as f64).sqrt();
        assert!((rms - p.alpha_base).abs() < 1e-9);
    }
}
