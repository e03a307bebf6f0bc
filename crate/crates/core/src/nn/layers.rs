use candle_core::Tensor;

use crate::error::Result;
use crate::nn::group_norm::group_norm;
use crate::nn::im2col;
use crate::nn::params::{Init, Scope};

/// Written with `tanh` so neither pass overflows for large `|x|`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// `x · wᵀ` over the last dimension of any-rank `x`, as one 2-D matmul.
pub fn linear_nd(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d_in = *dims.last().expect("non-scalar input");
    let rows = x.elem_count() / d_in.max(1);
    let y = x.reshape((rows, d_in))?.matmul(&w.t()?)?;
    let mut out = dims;
    *out.last_mut().expect("non-scalar input") = w.dim(0)?;
    Ok(y.reshape(out)?)
}

/// Nearest-neighbour ×2 upsampling of `(B, C, H, W)` built from broadcasts.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Upsamples ×2 and crops to `(h, w)`.
pub fn upsample_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let mut y = x.clone();
    while y.dim(2)? < h || y.dim(3)? < w {
        y = upsample2x(&y)?;
    }
    Ok(y.narrow(2, 0, h)?.narrow(3, 0, w)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv2d {
    pub fn new(s: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = c_in * k * k;
        Ok(Self {
            weight: s.get("weight", &[c_out, c_in, k, k], Init::FanIn { fan_in, gain: 1.0 })?,
            bias: s.get("bias", &[c_out], Init::Zeros)?,
            stride,
        })
    }

    /// Convolution whose weights start at zero.
    pub fn zeroed(s: &Scope, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[c_out, c_in, k, k], Init::Zeros)?,
            bias: s.get("bias", &[c_out], Init::Zeros)?,
            stride: 1,
        })
    }

    pub fn with_bias_init(s: &Scope, c_in: usize, c_out: usize, k: usize, bias: Init) -> Result<Self> {
        let fan_in = c_in * k * k;
        Ok(Self {
            weight: s.get("weight", &[c_out, c_in, k, k], Init::FanIn { fan_in, gain: 1.0 })?,
            bias: s.get("bias", &[c_out], bias)?,
            stride: 1,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        let (c_out, _, k, _) = self.weight.dims4()?;
        let (ho, wo) = im2col::output_size(h, w, k, self.stride);
        let cols = if k == 1 && self.stride == 1 {
            x.reshape((b, c_in, h * w))?.transpose(0, 1)?.reshape((c_in, b * h * w))?
        } else {
            im2col::im2col(x, k, self.stride)?
        };
        let y = self
            .weight
            .reshape((c_out, c_in * k * k))?
            .matmul(&cols)?
            .broadcast_add(&self.bias.reshape((c_out, 1))?)?
            .reshape((c_out, b, ho, wo))?
            .transpose(0, 1)?
            .contiguous()?;
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[d_out, d_in], Init::FanIn { fan_in: d_in, gain: 1.0 })?,
            bias: s.get("bias", &[d_out], Init::Zeros)?,
        })
    }

    pub fn no_bias_init(s: &Scope, d_in: usize, d_out: usize, init: Init) -> Result<Tensor> {
        s.get("weight", &[d_out, d_in], init)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies to the last dimension of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(linear_nd(x, &self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(s: &Scope, channels: usize, groups: usize) -> Result<Self> {
        let groups = if channels.is_multiple_of(groups) { groups } else { 1 };
        Ok(Self {
            gamma: s.get("gamma", &[channels], Init::Ones)?,
            beta: s.get("beta", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        group_norm(x, &self.gamma, &self.beta, self.groups, self.eps)
    }
}

/// GroupNorm → SiLU → conv → (+ embedding bias) → GroupNorm → SiLU → conv, plus skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(s: &Scope, c_in: usize, c_out: usize, emb_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&s.pp("norm1"), c_in, 8)?,
            conv1: Conv2d::new(&s.pp("conv1"), c_in, c_out, 3, 1)?,
            emb_proj: emb_dim
                .map(|d| Linear::new(&s.pp("emb"), d, c_out))
                .transpose()?,
            norm2: GroupNorm::new(&s.pp("norm2"), c_out, 8)?,
            conv2: Conv2d::new(&s.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: (c_in != c_out)
                .then(|| Conv2d::new(&s.pp("skip"), c_in, c_out, 1, 1))
                .transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor, emb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        if let (Some(p), Some(e)) = (&self.emb_proj, emb) {
            let e = p.forward(&silu(e)?)?;
            let (b, c) = e.dims2()?;
            h = h.broadcast_add(&e.reshape((b, c, 1, 1))?)?;
        }
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn sigmoid_gradient_is_finite_for_extreme_logits() {
        let x = candle_core::Var::new(&[-200f32, -20.0, 0.0, 20.0, 200.0], &Device::Cpu).unwrap();
        let y = sigmoid(x.as_tensor()).unwrap();
        let v: Vec<f32> = y.to_vec1().unwrap();
        assert_eq!(v[2], 0.5);
        assert!(v[0] >= 0.0 && v[4] <= 1.0);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g: Vec<f32> = g.get(x.as_tensor()).unwrap().to_vec1().unwrap();
        assert!(g.iter().all(|d| d.is_finite() && *d >= 0.0));
        assert!((g[2] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::arange(0f32, 6., &Device::Cpu).unwrap().reshape((1, 1, 2, 3)).unwrap();
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 6]);
        let row: Vec<f32> = y.get(0).unwrap().get(0).unwrap().get(1).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![0., 0., 1., 1., 2., 2.]);
        let z = upsample_to(&x.narrow(3, 0, 2).unwrap(), 4, 3).unwrap();
        assert_eq!(z.dims(), &[1, 1, 4, 3]);
    }

    #[test]
    fn groupnorm_normalizes_groups() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let gn = GroupNorm::new(&store.root(), 4, 2).unwrap();
        let x = Tensor::arange(0f64, 32., &Device::Cpu).unwrap().reshape((1, 4, 2, 4)).unwrap();
        let y = gn.forward(&x).unwrap();
        let g0 = y.narrow(1, 0, 2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean: f64 = g0.iter().sum::<f64>() / 16.0;
        let var: f64 = g0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
