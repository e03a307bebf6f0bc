//! The conditioned denoiser: garment encoder, auto-mask FPN and a small UNet
//! with local texture attention at selected resolutions.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::LocalTextureAttention;
use crate::automask::{apply_informative_mask, MaskFpn};
use crate::codec::{Latent, LATENT_CHANNELS};
use crate::conditioning::{
    combined_embedding, GarmentEncoder, GlobalProjection, TimestepEmbedding, GLOBAL_DIM, INPUT_CHANNELS, TIME_DIM,
};
use crate::error::{Error, Result};
use crate::nn::{silu, upsample_to, Conv2d, GroupNorm, ParamStore, ResBlock, Scope};

/// Garment key/value width: `G'_w` channels plus the `m_info` channel.
pub const KV_DIM: usize = LATENT_CHANNELS + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub widths: [usize; 3],
    pub window: usize,
    /// UNet levels (0 = latent resolution) that carry local texture attention.
    pub attn_levels: Vec<usize>,
    pub n_heads: usize,
    /// Also offers the global garment vector as one extra key/value token.
    pub global_token: bool,
    pub mask_head_bias: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 64],
            window: 4,
            attn_levels: vec![1, 2],
            n_heads: 4,
            global_token: false,
            mask_head_bias: 0.0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("diffusion.window must be at least 1".into()));
        }
        if let Some(l) = self.attn_levels.iter().find(|&&l| l > 2) {
            return Err(Error::Config(format!("attention level {l} does not exist (levels 0..=2)")));
        }
        for &w in &self.widths {
            if w % self.n_heads.max(1) != 0 || self.n_heads == 0 {
                return Err(Error::Config(format!("width {w} not divisible by {} heads", self.n_heads)));
            }
        }
        Ok(())
    }
}

/// Garment-derived conditioning that stays fixed across denoising steps.
#[derive(Debug, Clone)]
pub struct GarmentCondition {
    pub m_info: Tensor,
    pub g_prime: Latent,
    /// `(B, GLOBAL_DIM)` encoder output.
    pub global_vec: Tensor,
    /// `(B, TIME_DIM)` projection summed into the timestep embedding.
    pub global_emb: Tensor,
}

#[derive(Debug, Clone)]
struct Unet {
    conv_in: Conv2d,
    down0: ResBlock,
    pool0: Conv2d,
    down1: ResBlock,
    pool1: Conv2d,
    mid0: ResBlock,
    mid1: ResBlock,
    up1: ResBlock,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    attn_down1: Option<LocalTextureAttention>,
    attn_mid: Option<LocalTextureAttention>,
    attn_up1: Option<LocalTextureAttention>,
    attn_down0: Option<LocalTextureAttention>,
    attn_up0: Option<LocalTextureAttention>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    time: TimestepEmbedding,
    genc: GarmentEncoder,
    gproj: GlobalProjection,
    fpn: MaskFpn,
    unet: Unet,
}

pub const PREFIXES: [&str; 5] = ["time_embed", "garment_encoder", "global_proj", "automask", "unet"];

fn attn(s: &Scope, cfg: &DenoiserConfig, level: usize, name: &str) -> Result<Option<LocalTextureAttention>> {
    if !cfg.attn_levels.contains(&level) {
        return Ok(None);
    }
    let global = cfg.global_token.then_some(GLOBAL_DIM);
    Ok(Some(LocalTextureAttention::new(
        &s.pp(name),
        cfg.widths[level],
        cfg.n_heads,
        KV_DIM,
        cfg.window,
        global,
    )?))
}

impl Denoiser {
    pub fn new(store: &ParamStore, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let r = store.root();
        let [c0, c1, c2] = cfg.widths;
        let e = Some(TIME_DIM);
        let u = r.pp("unet");
        let unet = Unet {
            conv_in: Conv2d::new(&u.pp("conv_in"), INPUT_CHANNELS, c0, 3, 1)?,
            down0: ResBlock::new(&u.pp("down0"), c0, c0, e)?,
            pool0: Conv2d::new(&u.pp("pool0"), c0, c0, 3, 2)?,
            down1: ResBlock::new(&u.pp("down1"), c0, c1, e)?,
            pool1: Conv2d::new(&u.pp("pool1"), c1, c1, 3, 2)?,
            mid0: ResBlock::new(&u.pp("mid0"), c1, c2, e)?,
            mid1: ResBlock::new(&u.pp("mid1"), c2, c2, e)?,
            up1: ResBlock::new(&u.pp("up1"), c2 + c1, c1, e)?,
            up0: ResBlock::new(&u.pp("up0"), c1 + c0, c0, e)?,
            norm_out: GroupNorm::new(&u.pp("norm_out"), c0, 8)?,
            conv_out: Conv2d::new(&u.pp("conv_out"), c0, LATENT_CHANNELS, 3, 1)?,
            attn_down0: attn(&u, cfg, 0, "attn_down0")?,
            attn_up0: attn(&u, cfg, 0, "attn_up0")?,
            attn_down1: attn(&u, cfg, 1, "attn_down1")?,
            attn_up1: attn(&u, cfg, 1, "attn_up1")?,
            attn_mid: attn(&u, cfg, 2, "attn_mid")?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            time: TimestepEmbedding::new(&r.pp("time_embed"))?,
            genc: GarmentEncoder::new(&r.pp("garment_encoder"))?,
            gproj: GlobalProjection::new(&r.pp("global_proj"))?,
            fpn: MaskFpn::new(&r.pp("automask"), cfg.mask_head_bias)?,
            unet,
        })
    }

    /// Variables trained jointly by the diffusion objective.
    pub fn trainable_vars(store: &ParamStore) -> Vec<candle_core::Var> {
        PREFIXES
            .iter()
            .flat_map(|p| store.vars_with_prefix(&format!("{p}.")))
            .collect()
    }

    pub fn fpn_vars(store: &ParamStore) -> Vec<candle_core::Var> {
        store.vars_with_prefix("automask.")
    }

    pub fn predict_mask(&self, garment_lat: &Latent, m_w_lat: &Tensor) -> Result<Tensor> {
        self.fpn.predict_mask(garment_lat, m_w_lat)
    }

    /// `garment_img`: the flat in-shop garment `(B, 3, H, W)`.
    pub fn garment_condition(&self, garment_lat: &Latent, m_w_lat: &Tensor, garment_img: &Tensor) -> Result<GarmentCondition> {
        let m_info = self.fpn.predict_mask(garment_lat, m_w_lat)?;
        self.garment_condition_with_mask(garment_lat, m_info, garment_img)
    }

    pub fn garment_condition_with_mask(
        &self,
        garment_lat: &Latent,
        m_info: Tensor,
        garment_img: &Tensor,
    ) -> Result<GarmentCondition> {
        let g_prime = apply_informative_mask(garment_lat, &m_info)?;
        let global_vec = self.genc.forward(&garment_img.to_dtype(garment_lat.tensor().dtype())?)?;
        let global_emb = self.gproj.forward(&global_vec)?;
        Ok(GarmentCondition {
            m_info,
            g_prime,
            global_vec,
            global_emb,
        })
    }

    pub fn embedding(&self, t: &[usize], cond: &GarmentCondition) -> Result<Tensor> {
        let dtype = cond.global_emb.dtype();
        let time = self.time.forward(t, dtype, cond.global_emb.device())?;
        combined_embedding(&time, &cond.global_emb)
    }

    /// Predicts the noise in `input11`'s first four channels.
    pub fn unet_forward(&self, input11: &Tensor, t: &[usize], cond: &GarmentCondition) -> Result<Latent> {
        let (b, c, h, w) = input11.dims4()?;
        if c != INPUT_CHANNELS || t.len() != b || cond.g_prime.tensor().dims() != [b, LATENT_CHANNELS, h, w] {
            return Err(Error::shape(format!(
                "unet input {:?}, {} timesteps and garment latent {:?} are inconsistent",
                input11.dims(),
                t.len(),
                cond.g_prime.tensor().dims()
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("latent {h}x{w} must be divisible by 4")));
        }
        let emb = self.embedding(t, cond)?;
        let e = Some(&emb);
        let kv = Tensor::cat(&[cond.g_prime.tensor().clone(), cond.m_info.clone()], 1)?;
        let kv_levels = [kv.clone(), kv.avg_pool2d(2)?, kv.avg_pool2d(4)?];
        let global = self.cfg.global_token.then_some(&cond.global_vec);
        let site = |a: &Option<LocalTextureAttention>, x: Tensor, level: usize| -> Result<Tensor> {
            match a {
                Some(a) => {
                    let kv = &kv_levels[level];
                    let mask = kv.narrow(1, LATENT_CHANNELS, 1)?;
                    a.forward(&x, kv, &mask, global)
                }
                None => Ok(x),
            }
        };
        let n = &self.unet;
        let x = n.conv_in.forward(input11)?;
        let s0 = site(&n.attn_down0, n.down0.forward(&x, e)?, 0)?;
        let x = n.pool0.forward(&s0)?;
        let s1 = site(&n.attn_down1, n.down1.forward(&x, e)?, 1)?;
        let x = n.pool1.forward(&s1)?;
        let x = n.mid0.forward(&x, e)?;
        let x = site(&n.attn_mid, x, 2)?;
        let x = n.mid1.forward(&x, e)?;
        let x = Tensor::cat(&[upsample_to(&x, h / 2, w / 2)?, s1], 1)?;
        let x = site(&n.attn_up1, n.up1.forward(&x, e)?, 1)?;
        let x = Tensor::cat(&[upsample_to(&x, h, w)?, s0], 1)?;
        let x = site(&n.attn_up0, n.up0.forward(&x, e)?, 0)?;
        Latent::new(n.conv_out.forward(&silu(&n.norm_out.forward(&x)?)?)?)
    }
}

/// Zero tensors matching the conditioning layout, handy for probes.
pub fn probe_inputs(b: usize, h: usize, w: usize, dtype: DType, device: &Device) -> Result<(Tensor, Latent, Tensor, Tensor)> {
    let input = Tensor::zeros((b, INPUT_CHANNELS, h, w), dtype, device)?;
    let g = Latent::new(Tensor::zeros((b, LATENT_CHANNELS, h, w), dtype, device)?)?;
    let m = Tensor::zeros((b, 1, h, w), dtype, device)?;
    let img = Tensor::zeros((b, 3, h * 4, w * 4), dtype, device)?;
    Ok((input, g, m, img))
}
