//! Convolutional autoencoder mapping `H×W×3` images to `(H/4)×(W/4)×4`
//! latents and back. Trained once, then frozen while the diffusion model
//! trains.

use candle_core::{DType, Tensor, D};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, Image};
use crate::nn::optim::Adam;
use crate::nn::{sigmoid, silu, upsample2x, Conv2d, GroupNorm, ParamStore, ResBlock, Scope};
use crate::rng::{self, tag};

pub const STRIDE: usize = 4;
pub const LATENT_CHANNELS: usize = 4;
pub const PREFIX: &str = "codec";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub widths: [usize; 2],
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64],
            lr: 2e-3,
            steps: 1500,
            batch: 8,
            seed: 0,
        }
    }
}

/// A batch of latents, `(B, 4, H/4, W/4)`.
#[derive(Debug, Clone)]
pub struct Latent(pub Tensor);

impl Latent {
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 4 || dims[1] != LATENT_CHANNELS {
            return Err(Error::shape(format!(
                "latent must be (B, {LATENT_CHANNELS}, h, w), got {dims:?}"
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.0.dims();
        (d[2], d[3])
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    down1: Conv2d,
    res1: ResBlock,
    down2: Conv2d,
    res2: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv2d,
    res1: ResBlock,
    up1: Conv2d,
    res2: ResBlock,
    norm_out: GroupNorm,
    up2: Conv2d,
    conv_out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Codec {
    enc: Encoder,
    dec: Decoder,
    dtype: DType,
}

impl Codec {
    pub fn new(store: &ParamStore, cfg: &CodecConfig) -> Result<Self> {
        Self::from_scope(&store.root().pp(PREFIX), cfg)
    }

    fn from_scope(s: &Scope, cfg: &CodecConfig) -> Result<Self> {
        let [w0, w1] = cfg.widths;
        let e = s.pp("enc");
        let d = s.pp("dec");
        Ok(Self {
            enc: Encoder {
                down1: Conv2d::new(&e.pp("down1"), 3, w0, 3, 2)?,
                res1: ResBlock::new(&e.pp("res1"), w0, w0, None)?,
                down2: Conv2d::new(&e.pp("down2"), w0, w1, 3, 2)?,
                res2: ResBlock::new(&e.pp("res2"), w1, w1, None)?,
                norm_out: GroupNorm::new(&e.pp("norm_out"), w1, 8)?,
                conv_out: Conv2d::new(&e.pp("conv_out"), w1, LATENT_CHANNELS, 1, 1)?,
            },
            dec: Decoder {
                conv_in: Conv2d::new(&d.pp("conv_in"), LATENT_CHANNELS, w1, 3, 1)?,
                res1: ResBlock::new(&d.pp("res1"), w1, w1, None)?,
                up1: Conv2d::new(&d.pp("up1"), w1, w0, 3, 1)?,
                res2: ResBlock::new(&d.pp("res2"), w0, w0, None)?,
                norm_out: GroupNorm::new(&d.pp("norm_out"), w0, 8)?,
                up2: Conv2d::new(&d.pp("up2"), w0, 16, 3, 1)?,
                conv_out: Conv2d::new(&d.pp("conv_out"), 16, 3, 3, 1)?,
            },
            dtype: s.dtype(),
        })
    }

    fn check_image(x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % STRIDE != 0 || w % STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "codec input must be (B, 3, H, W) with H, W divisible by {STRIDE}; got {:?}",
                x.dims()
            )));
        }
        Ok(())
    }

    fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        Self::check_image(x)?;
        let x = x.to_dtype(self.dtype)?;
        let h = self.enc.down1.forward(&x)?;
        let h = self.enc.res1.forward(&h, None)?;
        let h = self.enc.down2.forward(&h)?;
        self.enc.res2.forward(&h, None)
    }

    /// `(B, 3, H, W)` in `[0,1]` → `(B, 4, H/4, W/4)`.
    pub fn encode(&self, x: &Tensor) -> Result<Latent> {
        let h = self.trunk(x)?;
        Latent::new(self.enc.conv_out.forward(&silu(&self.enc.norm_out.forward(&h)?)?)?)
    }

    /// Globally pooled trunk features, `(B, widths[1])`.
    pub fn pooled_features(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.trunk(x)?;
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    pub fn decode(&self, z: &Latent) -> Result<Tensor> {
        let z = z.tensor().to_dtype(self.dtype)?;
        let h = self.dec.conv_in.forward(&z)?;
        let h = self.dec.res1.forward(&h, None)?;
        let h = self.dec.up1.forward(&upsample2x(&h)?)?;
        let h = self.dec.res2.forward(&h, None)?;
        let h = upsample2x(&silu(&self.dec.norm_out.forward(&h)?)?)?;
        let h = silu(&self.dec.up2.forward(&h)?)?;
        sigmoid(&self.dec.conv_out.forward(&h)?)
    }

    /// Mean absolute reconstruction error of a batch.
    pub fn recon_loss(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.to_dtype(self.dtype)?;
        let y = self.decode(&self.encode(&x)?)?;
        Ok((y - x)?.abs()?.mean_all()?)
    }

    pub fn encode_images(&self, images: &[&Image]) -> Result<Latent> {
        let device = candle_core::Device::Cpu;
        self.encode(&batch_to_tensor(images, self.dtype, &device)?)
    }
}

pub fn codec_vars(store: &ParamStore) -> Vec<candle_core::Var> {
    store.vars_with_prefix(&format!("{PREFIX}."))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecLogLine {
    pub step: usize,
    pub loss: f32,
}

#[derive(Debug, Clone)]
pub struct CodecTrainReport {
    pub losses: Vec<f32>,
    /// Multiplier bringing encoded person latents to unit standard deviation.
    pub latent_scale: f64,
}

/// The batch of images the codec sees at `step`.
pub fn codec_batch<'a>(images: &[&'a Image], cfg: &CodecConfig, step: usize) -> Vec<&'a Image> {
    let mut r = rng::rng_from(cfg.seed, &[tag::BATCH, step as u64]);
    (0..cfg.batch.min(images.len().max(1)))
        .map(|_| images[r.random_range(0..images.len())])
        .collect()
}

/// Minimizes mean absolute reconstruction error with Adam.
pub fn train_codec(
    store: &ParamStore,
    images: &[&Image],
    cfg: &CodecConfig,
    mut on_step: impl FnMut(&CodecLogLine),
) -> Result<CodecTrainReport> {
    if images.is_empty() {
        return Err(Error::Argument("codec training needs at least one image".into()));
    }
    let codec = Codec::new(store, cfg)?;
    let mut opt = Adam::new(codec_vars(store), cfg.lr);
    let device = store.device().clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = codec_batch(images, cfg, step);
        let x = batch_to_tensor(&batch, store.dtype(), &device)?;
        let loss = codec.recon_loss(&x)?;
        let value = loss.to_dtype(DType::F32)?.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("codec loss is {value}"),
            });
        }
        opt.step(&loss.backward()?)?;
        losses.push(value);
        on_step(&CodecLogLine { step, loss: value });
    }
    let latent_scale = latent_scale(&codec, images)?;
    Ok(CodecTrainReport {
        losses,
        latent_scale,
    })
}

/// `1 / std` of the encoded latents over (up to 256 of) the given images.
pub fn latent_scale(codec: &Codec, images: &[&Image]) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut sq = 0.0f64;
    let mut n = 0usize;
    for chunk in images.iter().take(256).collect::<Vec<_>>().chunks(32) {
        let chunk: Vec<&Image> = chunk.iter().map(|i| **i).collect();
        let z = codec.encode_images(&chunk)?;
        let v = z.tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        n += v.len();
        sum += v.iter().sum::<f64>();
        sq += v.iter().map(|x| x * x).sum::<f64>();
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(1e-12);
    Ok(1.0 / var.sqrt())
}
