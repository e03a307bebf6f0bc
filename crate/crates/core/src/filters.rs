//! Small 2D filtering helpers on host images.

use crate::image::Image;

/// Normalized 1D Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    gaussian_kernel_sized(sigma, (2 * radius + 1) as usize)
}

/// Normalized 1D Gaussian taps with an explicit (odd) size.
pub fn gaussian_kernel_sized(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[inline]
fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable convolution of a `height × width` plane with replicate padding.
pub fn separable_f64(plane: &[f64], height: usize, width: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = clamp_idx(x as i64 + k as i64 - r, width);
                acc += t * plane[y * width + xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = clamp_idx(y as i64 + k as i64 - r, height);
                acc += t * tmp[yy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Gaussian blur of every channel with replicate padding.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let taps = gaussian_kernel(sigma);
    let (h, w, c) = img.dims();
    let mut out = img.clone();
    for ch in 0..c {
        let plane: Vec<f64> = (0..h * w).map(|i| img.data[i * c + ch] as f64).collect();
        let blurred = separable_f64(&plane, h, w, &taps);
        for (i, v) in blurred.into_iter().enumerate() {
            out.data[i * c + ch] = v as f32;
        }
    }
    out
}

/// 3×3 convolution of a single-channel plane with replicate padding.
pub fn conv3x3_replicate(plane: &Image, kernel: &[[f32; 3]; 3]) -> Image {
    assert_eq!(plane.channels, 1);
    let (h, w) = (plane.height, plane.width);
    let mut out = Image::mask(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (dy, row) in kernel.iter().enumerate() {
                for (dx, k) in row.iter().enumerate() {
                    let yy = clamp_idx(y as i64 + dy as i64 - 1, h);
                    let xx = clamp_idx(x as i64 + dx as i64 - 1, w);
                    acc += k * plane.data[yy * w + xx];
                }
            }
            out.data[y * w + x] = acc;
        }
    }
    out
}
