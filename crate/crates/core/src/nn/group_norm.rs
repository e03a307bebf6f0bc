//! Group normalization with per-channel affine, as one op with an analytic backward.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

struct GroupNormOp {
    groups: usize,
    eps: f64,
}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    hw: usize,
    groups: usize,
}

impl Dims {
    fn of(shape: &[usize], groups: usize) -> Self {
        Self {
            b: shape[0],
            c: shape[1],
            hw: shape[2..].iter().product(),
            groups,
        }
    }

    fn group_len(&self) -> usize {
        self.c / self.groups * self.hw
    }

    fn channel(&self, i: usize) -> usize {
        (i / self.hw) % self.c
    }
}

fn stats(x: &[f64], n: usize, eps: f64) -> Vec<(f64, f64)> {
    x.chunks(n)
        .map(|g| {
            let mean = g.iter().sum::<f64>() / n as f64;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

fn slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("group-norm expects contiguous inputs"),
    }
}

fn forward<T: WithDType>(x: &[T], gamma: &[T], beta: &[T], d: Dims, eps: f64) -> Vec<T> {
    let n = d.group_len();
    let xf: Vec<f64> = x.iter().map(|v| v.to_f64()).collect();
    let mut out = Vec::with_capacity(x.len());
    for (gi, (mean, inv)) in stats(&xf, n, eps).into_iter().enumerate() {
        for j in 0..n {
            let i = gi * n + j;
            let c = d.channel(i);
            out.push(T::from_f64((xf[i] - mean) * inv * gamma[c].to_f64() + beta[c].to_f64()));
        }
    }
    out
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = Dims::of(l1.dims(), self.groups);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, d, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(forward(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, d, self.eps))
            }
            _ => candle_core::bail!("group-norm supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = Dims::of(x.dims(), self.groups);
        let n = d.group_len();
        let v = |t: &Tensor| t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>();
        let (xf, gf, dy) = (v(x)?, v(gamma)?, v(grad)?);
        let mut dx = vec![0.0; xf.len()];
        let mut dgamma = vec![0.0; d.c];
        let mut dbeta = vec![0.0; d.c];
        for (gi, (mean, inv)) in stats(&xf, n, self.eps).into_iter().enumerate() {
            let range = gi * n..(gi + 1) * n;
            let mut sum_d = 0.0;
            let mut sum_dy = 0.0;
            for i in range.clone() {
                let c = d.channel(i);
                let yhat = (xf[i] - mean) * inv;
                let dyhat = dy[i] * gf[c];
                dgamma[c] += dy[i] * yhat;
                dbeta[c] += dy[i];
                sum_d += dyhat;
                sum_dy += dyhat * yhat;
            }
            let (md, mdy) = (sum_d / n as f64, sum_dy / n as f64);
            for i in range {
                let yhat = (xf[i] - mean) * inv;
                dx[i] = inv * (dy[i] * gf[d.channel(i)] - md - yhat * mdy);
            }
        }
        let _ = d.b;
        let mk = |v: Vec<f64>, like: &Tensor| Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype());
        Ok((Some(mk(dx, x)?), Some(mk(dgamma, gamma)?), Some(mk(dbeta, gamma)?)))
    }
}

/// `(B, C, …)` group normalization followed by `γ_c · x + β_c`.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormOp { groups, eps })?)
}
