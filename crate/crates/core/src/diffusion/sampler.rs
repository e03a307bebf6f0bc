use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::train::{encode_scaled, eps_from_prediction, garment_terms, Prediction};
use super::unet::{Denoiser, GarmentCondition};
use crate::automask::GtConfig;
use crate::codec::{Codec, Latent, STRIDE};
use crate::conditioning::{build_unet_input, resize_mask};
use crate::data_synth::TryOnSample;
use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, tensor_to_batch, Image, Mask};
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub mode: SamplerMode,
    pub n_steps: usize,
    pub seed: u64,
    /// Re-imposes the noised agnostic latent outside `M_a` after every step.
    pub latent_blend: bool,
    pub batch: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Ddim,
            n_steps: 50,
            seed: 0,
            latent_blend: false,
            batch: 16,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.n_steps == 0 || self.n_steps > t {
            return Err(Error::Config(format!("sample.n_steps must lie in [1, {t}]")));
        }
        if self.batch == 0 {
            return Err(Error::Config("sample.batch must be positive".into()));
        }
        Ok(())
    }

    fn eta(&self) -> f64 {
        match self.mode {
            SamplerMode::Ddpm => 1.0,
            SamplerMode::Ddim => 0.0,
        }
    }
}

/// Everything the reverse process conditions on, for a batch of samples.
#[derive(Debug, Clone)]
pub struct SampleConditions {
    pub agnostic_lat: Latent,
    pub m_a: Tensor,
    pub m_f: Tensor,
    pub m_s: Tensor,
    pub garment_lat: Latent,
    pub m_w_lat: Tensor,
    pub garment_img: Tensor,
    pub agnostic_images: Vec<Image>,
    pub agnostic_masks: Vec<Mask>,
    /// Per-sample noise stream keys.
    pub keys: Vec<u64>,
}

fn lat_masks(masks: &[&Mask]) -> Result<Tensor> {
    let pooled: Vec<Mask> = masks.iter().map(|m| resize_mask(m, STRIDE)).collect::<Result<_>>()?;
    batch_to_tensor(&pooled.iter().collect::<Vec<_>>(), DType::F32, &Device::Cpu)
}

impl SampleConditions {
    pub fn from_samples(codec: &Codec, scale: f64, samples: &[&TryOnSample], gt_cfg: &GtConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("no samples to condition on".into()));
        }
        let agn: Vec<&Image> = samples.iter().map(|s| &s.agnostic_image).collect();
        let warped: Vec<&Image> = samples.iter().map(|s| &s.warped_garment).collect();
        let wm: Vec<&Mask> = samples.iter().map(|s| &s.warped_mask).collect();
        let (g, mw, _) = garment_terms(codec, scale, &warped, &wm, gt_cfg)?;
        Ok(Self {
            agnostic_lat: Latent::new(encode_scaled(codec, &agn, scale)?)?,
            m_a: lat_masks(&samples.iter().map(|s| &s.agnostic_mask).collect::<Vec<_>>())?,
            m_f: lat_masks(&samples.iter().map(|s| &s.foreground_mask).collect::<Vec<_>>())?,
            m_s: lat_masks(&samples.iter().map(|s| &s.skin_mask).collect::<Vec<_>>())?,
            garment_lat: Latent::new(g)?,
            m_w_lat: mw,
            garment_img: batch_to_tensor(&samples.iter().map(|s| &s.garment).collect::<Vec<_>>(), DType::F32, &Device::Cpu)?,
            agnostic_images: samples.iter().map(|s| s.agnostic_image.clone()).collect(),
            agnostic_masks: samples.iter().map(|s| s.agnostic_mask.clone()).collect(),
            keys: samples.iter().map(|s| s.seed).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// `n` evenly spaced timesteps in `[0, T)`, ascending, always including `T − 1`.
pub fn timesteps(t: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, t);
    if n == 1 {
        return vec![t - 1];
    }
    let mut v: Vec<usize> = (0..n)
        .map(|i| ((i as f64) * (t - 1) as f64 / (n - 1) as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

fn noise_for(rngs: &mut [Rng], dims: (usize, usize, usize)) -> Result<Tensor> {
    let (c, h, w) = dims;
    let mut data = Vec::with_capacity(rngs.len() * c * h * w);
    for r in rngs.iter_mut() {
        data.extend(rng::normal_vec(r, c * h * w));
    }
    Ok(Tensor::from_vec(data, (rngs.len(), c, h, w), &Device::Cpu)?)
}

/// The standard-normal starting latent `z_T`, one stream per sample key.
pub fn initial_latent(cond: &SampleConditions, cfg: &SampleConfig) -> Result<Tensor> {
    let (_, c, h, w) = cond.garment_lat.tensor().dims4()?;
    let mut init: Vec<Rng> = cond.keys.iter().map(|&k| rng::rng_from(cfg.seed, &[tag::SAMPLER, k])).collect();
    noise_for(&mut init, (c, h, w))
}

/// Runs the reverse process and returns the clean latent estimate.
pub fn sample_latents(
    model: &Denoiser,
    sched: &NoiseSchedule,
    prediction: Prediction,
    cond: &SampleConditions,
    cfg: &SampleConfig,
) -> Result<Latent> {
    let init = initial_latent(cond, cfg)?;
    sample_from(model, sched, prediction, cond, cfg, init)
}

/// The reverse process started from a given `z_T`.
pub fn sample_from(
    model: &Denoiser,
    sched: &NoiseSchedule,
    prediction: Prediction,
    cond: &SampleConditions,
    cfg: &SampleConfig,
    init: Tensor,
) -> Result<Latent> {
    cfg.validate(sched.t)?;
    if init.dims() != cond.garment_lat.tensor().dims() {
        return Err(Error::shape(format!(
            "initial latent {:?} does not match the conditions {:?}",
            init.dims(),
            cond.garment_lat.tensor().dims()
        )));
    }
    let garment: GarmentCondition = model.garment_condition(&cond.garment_lat, &cond.m_w_lat, &cond.garment_img)?;
    let garment = GarmentCondition {
        m_info: garment.m_info.detach(),
        g_prime: Latent::new(garment.g_prime.tensor().detach())?,
        global_vec: garment.global_vec.detach(),
        global_emb: garment.global_emb.detach(),
    };
    let (b, c, h, w) = cond.garment_lat.tensor().dims4()?;
    let mut step_rngs: Vec<Rng> = cond.keys.iter().map(|&k| rng::rng_from(cfg.seed, &[tag::SAMPLER, k, 1])).collect();
    let mut x = init;
    let steps = timesteps(sched.t, cfg.n_steps);
    let eta = cfg.eta();
    for (i, &t) in steps.iter().enumerate().rev() {
        let ab = sched.alpha_bars[t];
        let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bars[steps[i - 1]] };
        let x_lat = Latent::new(x.clone())?;
        let input = build_unet_input(&x_lat, &cond.agnostic_lat, &cond.m_a, &cond.m_f, &cond.m_s)?;
        let tt = vec![t; b];
        let pred = model.unet_forward(&input, &tt, &garment)?;
        let eps = eps_from_prediction(&Latent::new(pred.tensor().detach())?, &x_lat, &tt, sched, prediction)?;
        let eps = eps.tensor();
        let x0_hat = ((&x - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = ((x0_hat * ab_prev.sqrt())? + (eps * dir)?)?;
        if sigma > 0.0 {
            next = (next + (noise_for(&mut step_rngs, (c, h, w))? * sigma)?)?;
        }
        if cfg.latent_blend {
            let known = if i == 0 {
                cond.agnostic_lat.tensor().clone()
            } else {
                let z = noise_for(&mut step_rngs, (c, h, w))?;
                ((cond.agnostic_lat.tensor() * ab_prev.sqrt())? + (z * (1.0 - ab_prev).sqrt())?)?
            };
            let keep = cond.m_a.ones_like()?.sub(&cond.m_a)?;
            next = (next.broadcast_mul(&cond.m_a)? + known.broadcast_mul(&keep)?)?;
        }
        x = next.detach();
    }
    Latent::new(x)
}

/// `decoded ⊙ M_a + I_a ⊙ (1 − M_a)`; pixels with `M_a = 0` are copied verbatim.
pub fn composite(decoded: &Image, agnostic: &Image, m_a: &Mask) -> Result<Image> {
    if !decoded.same_shape(agnostic) || m_a.height != decoded.height || m_a.width != decoded.width {
        return Err(Error::shape("composite inputs differ in size"));
    }
    let mut out = agnostic.clone();
    for y in 0..out.height {
        for x in 0..out.width {
            let m = m_a.get(y, x, 0);
            if m == 0.0 {
                continue;
            }
            for ch in 0..out.channels {
                let d = decoded.get(y, x, ch);
                let v = if m == 1.0 { d } else { d * m + agnostic.get(y, x, ch) * (1.0 - m) };
                out.set(y, x, ch, v);
            }
        }
    }
    Ok(out)
}

pub fn decode_latents(codec: &Codec, z: &Latent, scale: f64) -> Result<Vec<Image>> {
    let unscaled = Latent::new((z.tensor() / scale)?)?;
    tensor_to_batch(&codec.decode(&unscaled)?.detach())
}

/// Samples, decodes and composites one batch of conditions.
pub fn sample_images(
    model: &Denoiser,
    codec: &Codec,
    scale: f64,
    sched: &NoiseSchedule,
    prediction: Prediction,
    cond: &SampleConditions,
    cfg: &SampleConfig,
) -> Result<Vec<Image>> {
    let z = sample_latents(model, sched, prediction, cond, cfg)?;
    let decoded = decode_latents(codec, &z, scale)?;
    decoded
        .iter()
        .zip(&cond.agnostic_images)
        .zip(&cond.agnostic_masks)
        .map(|((d, a), m)| composite(d, a, m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_grid() {
        assert_eq!(timesteps(200, 1), vec![199]);
        assert_eq!(timesteps(10, 10), (0..10).collect::<Vec<_>>());
        let t = timesteps(200, 50);
        assert_eq!(t.len(), 50);
        assert_eq!((t[0], t[49]), (0, 199));
    }

    #[test]
    fn composite_copies_outside_mask() {
        let d = Image::filled(4, 4, 3, 0.9);
        let mut a = Image::zeros(4, 4, 3);
        a.set(0, 0, 1, 0.123_456_7);
        let mut m = Mask::mask(4, 4);
        m.set(2, 2, 0, 1.0);
        let out = composite(&d, &a, &m).unwrap();
        assert_eq!(out.get(0, 0, 1), 0.123_456_7);
        assert_eq!(out.get(2, 2, 0), 0.9);
    }
}
