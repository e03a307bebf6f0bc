//! Informative-mask prediction and its Laplacian supervision.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::{Latent, LATENT_CHANNELS, STRIDE};
use crate::conditioning::resize_mask;
use crate::data_synth::morph::{dilate, erode};
use crate::error::{Error, Result};
use crate::filters::conv3x3_replicate;
use crate::image::{Image, Mask};
use crate::nn::{sigmoid, silu, upsample_to, Conv2d, Init, ResBlock, Scope};

pub const LAPLACIAN: [[f32; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
const LATERAL: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GtConfig {
    /// Binarization threshold on the normalized Laplacian magnitude.
    pub tau: f32,
    /// Lower bound of the normalizer, so near-flat garments stay empty.
    pub norm_floor: f32,
    /// Pixels within this distance of the garment silhouette are ignored.
    pub border: usize,
    pub dilate: usize,
}

impl Default for GtConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            norm_floor: 0.05,
            border: 1,
            dilate: 1,
        }
    }
}

impl GtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.norm_floor < 0.0 {
            return Err(Error::Config("norm_floor must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MaskPrediction {
    pub m_info: Tensor,
    pub gt_mask: Tensor,
    pub l_min: Tensor,
    pub l_preserve: Tensor,
}

#[derive(Debug, Clone)]
struct Level {
    down: Conv2d,
    blocks: [ResBlock; 2],
    lateral: Conv2d,
}

/// Three-level feature pyramid over `[E(G_w), M_w]` with a sigmoid head.
#[derive(Debug, Clone)]
pub struct MaskFpn {
    stem: Conv2d,
    stem_lateral: Conv2d,
    levels: Vec<Level>,
    head: Conv2d,
}

impl MaskFpn {
    pub fn new(s: &Scope, head_bias: f64) -> Result<Self> {
        let widths = [16usize, 32, 64, 64];
        let stem = Conv2d::new(&s.pp("stem"), LATENT_CHANNELS + 1, widths[0], 3, 1)?;
        let stem_lateral = Conv2d::new(&s.pp("stem_lateral"), widths[0], LATERAL, 1, 1)?;
        let mut levels = Vec::new();
        for i in 0..3 {
            let l = s.pp(format!("level{i}"));
            let c = widths[i + 1];
            levels.push(Level {
                down: Conv2d::new(&l.pp("down"), widths[i], c, 3, 2)?,
                blocks: [
                    ResBlock::new(&l.pp("res0"), c, c, None)?,
                    ResBlock::new(&l.pp("res1"), c, c, None)?,
                ],
                lateral: Conv2d::new(&l.pp("lateral"), c, LATERAL, 1, 1)?,
            });
        }
        let head = Conv2d::with_bias_init(&s.pp("head"), LATERAL, 1, 3, Init::Const(head_bias))?;
        Ok(Self {
            stem,
            stem_lateral,
            levels,
            head,
        })
    }

    /// `g_latent`: `(B, 4, h, w)`; `m_w_lat`: `(B, 1, h, w)` → `(B, 1, h, w)` in `(0, 1)`.
    pub fn predict_mask(&self, g_latent: &Latent, m_w_lat: &Tensor) -> Result<Tensor> {
        let g = g_latent.tensor();
        let (b, _, h, w) = g.dims4()?;
        if m_w_lat.dims() != [b, 1, h, w] {
            return Err(Error::shape(format!(
                "warped-garment mask {:?} does not match latent {:?}",
                m_w_lat.dims(),
                g.dims()
            )));
        }
        let x = Tensor::cat(&[g.clone(), m_w_lat.to_dtype(g.dtype())?], 1)?;
        let mut feat = silu(&self.stem.forward(&x)?)?;
        let mut laterals = vec![self.stem_lateral.forward(&feat)?];
        for level in &self.levels {
            feat = level.down.forward(&feat)?;
            for block in &level.blocks {
                feat = block.forward(&feat, None)?;
            }
            laterals.push(level.lateral.forward(&feat)?);
        }
        let mut top = laterals.pop().expect("pyramid has levels");
        while let Some(lat) = laterals.pop() {
            let (_, _, lh, lw) = lat.dims4()?;
            top = (lat + upsample_to(&top, lh, lw)?)?;
        }
        sigmoid(&self.head.forward(&silu(&top)?)?)
    }
}

/// `|∇²Y|` of the luma with replicate padding, one channel.
pub fn laplacian_magnitude(img: &Image) -> Image {
    let mut l = conv3x3_replicate(&img.luma(), &LAPLACIAN);
    for v in l.data.iter_mut() {
        *v = v.abs();
    }
    l
}

/// Pixel-resolution binary edge mask before dilation and pooling.
pub fn edge_mask(warped_garment: &Image, m_w: &Mask, cfg: &GtConfig) -> Result<Mask> {
    if warped_garment.height != m_w.height || warped_garment.width != m_w.width || m_w.channels != 1 {
        return Err(Error::shape(format!(
            "garment {:?} and mask {:?} differ",
            warped_garment.dims(),
            m_w.dims()
        )));
    }
    let support = erode(&binarize(m_w), cfg.border);
    let mag = laplacian_magnitude(warped_garment);
    let peak = mag
        .data
        .iter()
        .zip(&support.data)
        .filter(|(_, &s)| s > 0.0)
        .map(|(&v, _)| v)
        .fold(0.0f32, f32::max);
    let mut out = Mask::mask(m_w.height, m_w.width);
    if peak == 0.0 {
        return Ok(out);
    }
    let norm = peak.max(cfg.norm_floor);
    for ((o, &v), &s) in out.data.iter_mut().zip(&mag.data).zip(&support.data) {
        if s > 0.0 && v / norm >= cfg.tau {
            *o = 1.0;
        }
    }
    Ok(out)
}

fn binarize(m: &Mask) -> Mask {
    let mut out = m.clone();
    for v in out.data.iter_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    out
}

/// Laplacian ground truth pooled to latent resolution, `≤ dilate(M_w)`.
pub fn laplacian_gt(warped_garment: &Image, m_w: &Mask, cfg: &GtConfig) -> Result<Mask> {
    cfg.validate()?;
    let edges = dilate(&edge_mask(warped_garment, m_w, cfg)?, cfg.dilate);
    resize_mask(&edges, STRIDE)
}

/// Mean of all elements.
pub fn l_min(m_info: &Tensor) -> Result<Tensor> {
    Ok(m_info.mean_all()?)
}

/// Mean squared difference.
pub fn l_preserve(m_info: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if m_info.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "m_info {:?} and ground truth {:?} differ",
            m_info.dims(),
            gt.dims()
        )));
    }
    Ok((m_info - gt.to_dtype(m_info.dtype())?)?.sqr()?.mean_all()?)
}

/// `G'_w = m_info ⊙ E(G_w)`, the mask broadcast over latent channels.
pub fn apply_informative_mask(g_latent: &Latent, m_info: &Tensor) -> Result<Latent> {
    let g = g_latent.tensor();
    let (b, _, h, w) = g.dims4()?;
    if m_info.dims() != [b, 1, h, w] {
        return Err(Error::shape(format!(
            "m_info {:?} does not match latent {:?}",
            m_info.dims(),
            g.dims()
        )));
    }
    Latent::new(g.broadcast_mul(m_info)?)
}
