//! Row softmax over the last dimension with its backward pass.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType, D};

use crate::error::Result;

struct SoftmaxLastDim;

fn rows<T: WithDType>(src: &[T], dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    let mut buf = vec![0f64; dim];
    for row in src.chunks_exact(dim) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
        let mut sum = 0.0;
        for (b, v) in buf.iter_mut().zip(row) {
            *b = (v.to_f64() - max).exp();
            sum += *b;
        }
        out.extend(buf.iter().map(|b| T::from_f64(b / sum)));
    }
    out
}

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *layout.dims().last().unwrap_or(&1);
        let (a, b) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax expects a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(rows(&v[a..b], dim)),
            CpuStorage::F64(v) => CpuStorage::F64(rows(&v[a..b], dim)),
            _ => candle_core::bail!("softmax supports f32 and f64"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some(grad_res.broadcast_sub(&dot)?.mul(res)?))
    }
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLastDim)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn matches_reference_and_has_a_gradient() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 2.0, (3, 4, 7), &dev).unwrap()).unwrap();
        let y = softmax_last_dim(x.as_tensor()).unwrap();
        let e = x.as_tensor().exp().unwrap();
        let r = e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap();
        let d = (&y - &r).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-14);
        let w = Tensor::randn(0f64, 1.0, (3, 4, 7), &dev).unwrap();
        let g = (&y * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (&r * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let a = g.get(x.as_tensor()).unwrap();
        let b = gr.get(x.as_tensor()).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }
}
