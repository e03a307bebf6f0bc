//! Host-side image and mask buffers (HWC, row-major, `f32`).

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::tensor_io::{TensorBlob, TensorData};

/// An `height × width × channels` float image. Masks are single-channel
/// images whose values are in `{0, 1}` (or `[0, 1]` once pooled).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub type Mask = Image;

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn mask(height: usize, width: usize) -> Self {
        Self::zeros(height, width, 1)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = self.idx(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Rec. 601 luma of an RGB image.
    pub fn luma(&self) -> Image {
        assert_eq!(self.channels, 3, "luma needs an RGB image");
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Multiplies every channel by a single-channel mask.
    pub fn masked(&self, mask: &Mask) -> Image {
        debug_assert_eq!((mask.height, mask.width), (self.height, self.width));
        let mut out = self.clone();
        for (px, m) in out.data.chunks_exact_mut(self.channels).zip(&mask.data) {
            for v in px {
                *v *= m;
            }
        }
        out
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    pub fn to_blob(&self) -> TensorBlob {
        TensorBlob {
            shape: vec![self.height, self.width, self.channels],
            data: TensorData::F32(self.data.clone()),
        }
    }

    /// Binary masks are stored as `u8`; callers pass only `{0,1}` masks here.
    pub fn to_mask_blob(&self) -> TensorBlob {
        TensorBlob {
            shape: vec![self.height, self.width, self.channels],
            data: TensorData::U8(self.data.iter().map(|&v| v as u8).collect()),
        }
    }

    pub fn from_blob(blob: TensorBlob) -> Result<Self> {
        if blob.shape.len() != 3 {
            return Err(Error::shape(format!(
                "image blob must be rank 3, got {:?}",
                blob.shape
            )));
        }
        let (h, w, c) = (blob.shape[0], blob.shape[1], blob.shape[2]);
        Self::from_vec(h, w, c, blob.into_f32()?)
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.height, self.width, self.channels),
            device,
        )?
        .permute((2, 0, 1))?
        .unsqueeze(0)?
        .to_dtype(dtype)?)
    }

    /// Inverse of [`Image::to_tensor`] for a `(C, H, W)` or `(1, C, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        let data = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::from_vec(h, w, c, data)
    }
}

/// Stacks images into a `(B, C, H, W)` tensor.
pub fn batch_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let mut parts = Vec::with_capacity(images.len());
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::shape("images in a batch must share a shape"));
        }
        parts.push(img.to_tensor(dtype, device)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Splits a `(B, C, H, W)` tensor into host images.
pub fn tensor_to_batch(t: &Tensor) -> Result<Vec<Image>> {
    let b = t.dim(0)?;
    (0..b).map(|i| Image::from_tensor(&t.get(i)?)).collect()
}
