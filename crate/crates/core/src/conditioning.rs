//! Pixel-aligned UNet input and the global garment embedding.

use candle_core::{DType, Device, Tensor, D};

use crate::codec::Latent;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::nn::{silu, Conv2d, Linear, Scope};

pub const INPUT_CHANNELS: usize = 11;
pub const GLOBAL_DIM: usize = 64;
pub const TIME_DIM: usize = 128;

/// Channel offsets in the 11-channel UNet input.
pub mod channel {
    pub const NOISY: usize = 0;
    pub const AGNOSTIC: usize = 4;
    pub const AGNOSTIC_MASK: usize = 8;
    pub const FOREGROUND_MASK: usize = 9;
    pub const SKIN_MASK: usize = 10;
}

/// Average-pools a mask over `stride × stride` blocks; values stay soft.
pub fn resize_mask(mask: &Mask, stride: usize) -> Result<Mask> {
    if stride == 0 || !mask.height.is_multiple_of(stride) || !mask.width.is_multiple_of(stride) || mask.channels != 1 {
        return Err(Error::shape(format!(
            "mask {}x{}x{} is not divisible by stride {stride}",
            mask.height, mask.width, mask.channels
        )));
    }
    let (h, w) = (mask.height / stride, mask.width / stride);
    let mut out = Mask::mask(h, w);
    let inv = 1.0 / (stride * stride) as f32;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for dy in 0..stride {
                for dx in 0..stride {
                    acc += mask.get(y * stride + dy, x * stride + dx, 0);
                }
            }
            out.set(y, x, 0, acc * inv);
        }
    }
    Ok(out)
}

/// Everything the denoiser is conditioned on for one batch.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// `(B, 11, h, w)`.
    pub input11: Tensor,
    /// `E(G_w)`, `(B, 4, h, w)`.
    pub garment_latent: Latent,
    /// `M_w` at latent resolution, `(B, 1, h, w)`.
    pub warped_mask_lat: Tensor,
    /// `(B, TIME_DIM)`.
    pub global_embed: Tensor,
}

fn expect_spatial(name: &str, t: &Tensor, c: usize, b: usize, h: usize, w: usize) -> Result<()> {
    let d = t.dims();
    if d != [b, c, h, w] {
        return Err(Error::shape(format!(
            "{name} has shape {d:?}, expected [{b}, {c}, {h}, {w}]"
        )));
    }
    Ok(())
}

/// Concatenates `[z_t(4), agnostic(4), M_a, M_f, M_s]` along channels.
pub fn build_unet_input(
    z_t: &Latent,
    agnostic: &Latent,
    m_a: &Tensor,
    m_f: &Tensor,
    m_s: &Tensor,
) -> Result<Tensor> {
    let (b, _, h, w) = z_t.tensor().dims4()?;
    expect_spatial("agnostic latent", agnostic.tensor(), 4, b, h, w)?;
    expect_spatial("agnostic mask", m_a, 1, b, h, w)?;
    expect_spatial("foreground mask", m_f, 1, b, h, w)?;
    expect_spatial("skin mask", m_s, 1, b, h, w)?;
    let dtype = z_t.tensor().dtype();
    Ok(Tensor::cat(
        &[
            z_t.tensor().clone(),
            agnostic.tensor().to_dtype(dtype)?,
            m_a.to_dtype(dtype)?,
            m_f.to_dtype(dtype)?,
            m_s.to_dtype(dtype)?,
        ],
        1,
    )?)
}

/// Standard sinusoidal embedding, `(B, dim)` with `[sin | cos]` halves.
pub fn sinusoidal_embedding(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let row: Vec<f64> = (0..half)
            .map(|i| step as f64 * (-(10000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        v.extend(row.iter().map(|a| a.sin()));
        v.extend(row.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// Sinusoid followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    fc1: Linear,
    fc2: Linear,
}

impl TimestepEmbedding {
    pub fn new(s: &Scope) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&s.pp("fc1"), TIME_DIM, TIME_DIM)?,
            fc2: Linear::new(&s.pp("fc2"), TIME_DIM, TIME_DIM)?,
        })
    }

    pub fn forward(&self, t: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let e = sinusoidal_embedding(t, TIME_DIM, dtype, device)?;
        self.fc2.forward(&silu(&self.fc1.forward(&e)?)?)
    }
}

/// Three stride-2 conv stages with global average pooling: `(B,3,H,W)` → `(B, 64)`.
#[derive(Debug, Clone)]
pub struct GarmentEncoder {
    convs: [Conv2d; 3],
    out: Linear,
}

impl GarmentEncoder {
    pub fn new(s: &Scope) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv2d::new(&s.pp("conv0"), 3, 16, 3, 2)?,
                Conv2d::new(&s.pp("conv1"), 16, 32, 3, 2)?,
                Conv2d::new(&s.pp("conv2"), 32, GLOBAL_DIM, 3, 2)?,
            ],
            out: Linear::new(&s.pp("out"), GLOBAL_DIM, GLOBAL_DIM)?,
        })
    }

    pub fn forward(&self, garment: &Tensor) -> Result<Tensor> {
        let mut h = garment.clone();
        for c in &self.convs {
            h = silu(&c.forward(&h)?)?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        self.out.forward(&pooled)
    }
}

/// MLP compressing the garment vector to the timestep-embedding width.
#[derive(Debug, Clone)]
pub struct GlobalProjection {
    fc1: Linear,
    fc2: Linear,
}

impl GlobalProjection {
    pub fn new(s: &Scope) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&s.pp("fc1"), GLOBAL_DIM, TIME_DIM)?,
            fc2: Linear::new(&s.pp("fc2"), TIME_DIM, TIME_DIM)?,
        })
    }

    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&silu(&self.fc1.forward(v)?)?)
    }
}

/// `timestep_embedding(t) + project(global(G))`.
pub fn combined_embedding(time: &Tensor, projected_garment: &Tensor) -> Result<Tensor> {
    Ok((time + projected_garment)?)
}
