//! Patch extraction for convolution as a single matmul.
//!
//! `(B, C, H, W)` → `(C·k·k, B·Ho·Wo)` with zero padding `k/2`. Rows are
//! ordered `(c, dy, dx)` so they line up with a `(C_out, C, k, k)` weight
//! reshaped to `(C_out, C·k·k)`; columns are ordered `(b, oy, ox)`. The
//! backward pass scatters column gradients back (col2im).

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(b: usize, c: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        Self {
            b,
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn cols_len(&self) -> usize {
        self.b * self.c * self.k * self.k * self.ho * self.wo
    }

    /// Calls `f(src_index, col_index)` for every in-bounds tap.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = self.ho * self.wo;
        for bi in 0..self.b {
            for ci in 0..self.c {
                let src = (bi * self.c + ci) * self.h * self.w;
                for dy in 0..k {
                    for dx in 0..k {
                        let row = (ci * k + dy) * k + dx;
                        let dst = (row * self.b + bi) * n;
                        for oy in 0..self.ho {
                            let iy = (oy * s + dy) as isize - p;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.wo {
                                let ix = (ox * s + dx) as isize - p;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(src + iy as usize * self.w + ix as usize, dst + oy * self.wo + ox);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn gather<T: WithDType>(src: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.cols_len()];
    g.for_each(|s, d| out[d] = src[s]);
    out
}

fn scatter<T: WithDType>(cols: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.b * g.c * g.h * g.w];
    g.for_each(|s, d| out[s] += cols[d]);
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.c * g.k * g.k, g.b * g.ho * g.wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(contiguous_slice(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(contiguous_slice(v, layout)?, g)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.b, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(contiguous_slice(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(contiguous_slice(v, layout)?, g)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }
}

/// Output spatial size of [`im2col`] for input `(h, w)`.
pub fn output_size(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    let g = Geometry::new(1, 1, h, w, k, stride);
    (g.ho, g.wo)
}

pub fn im2col(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let g = Geometry::new(b, c, h, w, k, stride);
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    #[test]
    fn matches_direct_convolution() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 7, 6), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (5, 3, 3, 3), &dev).unwrap();
        for stride in [1, 2] {
            let cols = im2col(&x, 3, stride).unwrap();
            let (ho, wo) = output_size(7, 6, 3, stride);
            let y = w
                .reshape((5, 27))
                .unwrap()
                .matmul(&cols)
                .unwrap()
                .reshape((5, 2, ho, wo))
                .unwrap()
                .transpose(0, 1)
                .unwrap();
            let r = x.conv2d(&w, 1, stride, 1, 1).unwrap();
            let d = (y - r).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "stride {stride}: {d}");
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 2, 5, 4), &dev).unwrap()).unwrap();
        let cols = im2col(x.as_tensor(), 3, 2).unwrap();
        let probe = Tensor::randn(0f64, 1.0, cols.dims(), &dev).unwrap();
        let grads = (cols.clone() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap();
        // <im2col(x), p> == <x, col2im(p)>
        let lhs = (cols * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (x.as_tensor() * gx).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
        assert_eq!(gx.dtype(), DType::F64);
    }
}
