//! Image and mask metrics, and the attention cost benchmark.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::attention::{mac_count_rect, window_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::filters::gaussian_kernel_sized;
use crate::image::{Image, Mask};
use crate::nn::{counter, ParamStore};
use crate::rng;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!("images {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// Separable filter keeping only fully covered positions.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Per-channel SSIM maps over the valid region, `(maps, out_h, out_w)`.
fn ssim_maps(a: &Image, b: &Image) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    check_same(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let taps = gaussian_kernel_sized(SSIM_SIGMA, SSIM_WINDOW);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (h, w) = (a.height, a.width);
    let mut maps = Vec::with_capacity(a.channels);
    let (mut oh, mut ow) = (0, 0);
    for c in 0..a.channels {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data[i * a.channels + c] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data[i * b.channels + c] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let (mu_a, h2, w2) = filter_valid(&pa, h, w, &taps);
        let (mu_b, _, _) = filter_valid(&pb, h, w, &taps);
        let (e_aa, _, _) = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let (e_bb, _, _) = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let (e_ab, _, _) = filter_valid(&prod(&pa, &pb), h, w, &taps);
        oh = h2;
        ow = w2;
        let map = (0..oh * ow)
            .map(|i| {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
            })
            .collect();
        maps.push(map);
    }
    Ok((maps, oh, ow))
}

/// Gaussian-window SSIM averaged over the valid region and the channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (maps, _, _) = ssim_maps(a, b)?;
    let n: usize = maps.iter().map(|m| m.len()).sum();
    Ok(maps.iter().flatten().sum::<f64>() / n as f64)
}

/// SSIM map averaged over window centres where `mask ≥ 0.5`.
pub fn masked_ssim(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    if mask.height != a.height || mask.width != a.width {
        return Err(Error::shape("mask does not match the images"));
    }
    let (maps, oh, ow) = ssim_maps(a, b)?;
    let r = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..oh {
        for x in 0..ow {
            if mask.get(y + r, x + r, 0) >= 0.5 {
                for m in &maps {
                    sum += m[y * ow + x];
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Argument("mask has no pixels inside the SSIM valid region".into()));
    }
    Ok(sum / n as f64)
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn toy_fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map(|v| v.len()).unwrap_or(0);
    if d == 0 || b.iter().chain(a).any(|v| v.len() != d) {
        return Err(Error::Argument("feature sets must be non-empty with equal dimensions".into()));
    }
    if a.len() < d + 1 || b.len() < d + 1 {
        return Err(Error::Argument(format!(
            "toy-FID in {d} dimensions needs at least {} samples per set (got {} and {})",
            d + 1,
            a.len(),
            b.len()
        )));
    }
    let (mu_a, cov_a) = moments(a, d);
    let (mu_b, cov_b) = moments(b, d);
    let sa = psd_sqrt(&cov_a);
    let cross = psd_sqrt(&(&sa * &cov_b * &sa));
    let fid = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(fid.max(0.0))
}

fn moments(x: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mu = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

/// Symmetric square root with negative eigenvalues clipped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Mean `|a − b|` over all channels of pixels with `mask ≥ 0.5`; 0 for an empty mask.
pub fn masked_l1(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    check_same(a, b)?;
    if mask.height != a.height || mask.width != a.width {
        return Err(Error::shape("mask does not match the images"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if mask.get(y, x, 0) >= 0.5 {
                for c in 0..a.channels {
                    sum += (a.get(y, x, c) - b.get(y, x, c)).abs() as f64;
                    n += 1;
                }
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// IoU of `m ≥ thresh` sets; two empty sets count as a perfect match.
pub fn mask_iou(m1: &Mask, m2: &Mask, thresh: f32) -> Result<f64> {
    if m1.dims() != m2.dims() {
        return Err(Error::shape(format!("masks {:?} and {:?} differ", m1.dims(), m2.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in m1.data.iter().zip(&m2.data) {
        let (a, b) = (a >= thresh, b >= thresh);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// The agnostic image with the warped garment pasted over its mask.
pub fn paste_baseline(agnostic: &Image, warped_garment: &Image, warped_mask: &Mask) -> Result<Image> {
    check_same(agnostic, warped_garment)?;
    let mut out = agnostic.clone();
    for y in 0..out.height {
        for x in 0..out.width {
            if warped_mask.get(y, x, 0) >= 0.5 {
                for c in 0..out.channels {
                    out.set(y, x, c, warped_garment.get(y, x, c));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, values: Vec<f64>, config: serde_json::Value) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            metric: metric.into(),
            values,
            mean,
            std,
            config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    #[serde(rename = "Hl")]
    pub hl: usize,
    #[serde(rename = "Wl")]
    pub wl: usize,
    #[serde(rename = "C")]
    pub c: usize,
    /// `None` is a single window covering the whole map.
    pub w: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    #[serde(flatten)]
    pub case: BenchCase,
    pub analytic_macs: u64,
    pub measured_macs: u64,
    pub wall_time_ms: f64,
}

impl BenchEntry {
    pub fn relative_error(&self) -> f64 {
        (self.measured_macs as f64 - self.analytic_macs as f64).abs() / self.analytic_macs as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn find(&self, hl: usize, wl: usize, c: usize, w: Option<usize>) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.case == BenchCase { hl, wl, c, w })
    }
}

pub const BENCH_TOLERANCE: f64 = 0.01;

/// The default grid: the 16×12×32 pair plus a few other sizes.
pub fn default_bench_grid() -> Vec<BenchCase> {
    let mut grid = Vec::new();
    for &(hl, wl, c) in &[(16, 12, 32), (8, 6, 64), (32, 24, 16)] {
        for w in [None, Some(1), Some(2), Some(4), Some(8)] {
            grid.push(BenchCase { hl, wl, c, w });
        }
    }
    grid
}

/// Runs windowed attention for each case, counting the `QKᵀ`/`AV` MACs.
pub fn bench_attention(grid: &[BenchCase], seed: u64) -> Result<BenchReport> {
    let dev = Device::Cpu;
    let mut entries = Vec::with_capacity(grid.len());
    for case in grid {
        let heads = if case.c % 4 == 0 { 4 } else { 1 };
        let store = ParamStore::new(seed, DType::F32, dev.clone());
        let params = AttentionParams::new(&store.root().pp("bench"), case.c, heads, case.c)?;
        let mut r = rng::rng_from(seed, &[case.hl as u64, case.wl as u64, case.c as u64]);
        let n = case.hl * case.wl * case.c;
        let img = Tensor::from_vec(rng::normal_vec(&mut r, n), (1, case.hl, case.wl, case.c), &dev)?;
        let g = Tensor::from_vec(rng::normal_vec(&mut r, n), (1, case.hl, case.wl, case.c), &dev)?;
        let mask = Tensor::ones((1, case.hl, case.wl), DType::F32, &dev)?;
        let (wh, ww) = case.w.map(|w| (w, w)).unwrap_or((case.hl, case.wl));
        let start = Instant::now();
        let (out, measured) = counter::measure(|| window_attention(&img, &g, &mask, wh, ww, &params, None));
        out?;
        entries.push(BenchEntry {
            case: *case,
            analytic_macs: mac_count_rect(case.hl, case.wl, case.c, wh, ww),
            measured_macs: measured,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(BenchReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(seed: u64, h: usize, w: usize) -> Image {
        let mut r = rng::rng_from(seed, &[]);
        let data = rng::normal_vec(&mut r, h * w * 3).into_iter().map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0)).collect();
        Image::from_vec(h, w, 3, data).unwrap()
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = noise_image(1, 24, 20);
        let b = noise_image(2, 24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn ssim_shape_errors() {
        assert!(ssim(&Image::zeros(16, 16, 3), &Image::zeros(16, 15, 3)).is_err());
        assert!(ssim(&Image::zeros(8, 8, 3), &Image::zeros(8, 8, 3)).is_err());
    }

    #[test]
    fn masked_l1_and_iou() {
        let a = noise_image(3, 8, 8);
        let m = Mask::filled(8, 8, 1, 1.0);
        assert_eq!(masked_l1(&a, &a, &m).unwrap(), 0.0);
        assert_eq!(mask_iou(&m, &m, 0.5).unwrap(), 1.0);
        let mut left = Mask::mask(8, 8);
        let mut right = Mask::mask(8, 8);
        for y in 0..8 {
            left.set(y, 0, 0, 1.0);
            right.set(y, 7, 0, 1.0);
        }
        assert_eq!(mask_iou(&left, &right, 0.5).unwrap(), 0.0);
        assert_eq!(mask_iou(&Mask::mask(4, 4), &Mask::mask(4, 4), 0.5).unwrap(), 1.0);
        assert!(mask_iou(&left, &Mask::mask(4, 4), 0.5).is_err());
    }

    #[test]
    fn paste_uses_garment_inside_mask() {
        let a = Image::filled(4, 4, 3, 0.2);
        let g = Image::filled(4, 4, 3, 0.8);
        let mut m = Mask::mask(4, 4);
        m.set(1, 1, 0, 1.0);
        let p = paste_baseline(&a, &g, &m).unwrap();
        assert_eq!(p.get(1, 1, 2), 0.8);
        assert_eq!(p.get(0, 0, 0), 0.2);
    }

    #[test]
    fn metric_report_mean() {
        let r = MetricReport::new("x", vec![1.0, 2.0, 3.0], serde_json::json!({}));
        assert_eq!(r.mean, 2.0);
    }

    #[test]
    fn fid_too_few_samples() {
        let a = vec![vec![0.0, 1.0]; 2];
        assert!(matches!(toy_fid(&a, &a), Err(Error::Argument(_))));
    }
}
