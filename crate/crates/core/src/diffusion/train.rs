use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::schedule::{make_schedule, q_sample, NoiseSchedule};
use super::unet::{Denoiser, DenoiserConfig};
use crate::automask::{l_min, l_preserve, laplacian_gt, GtConfig};
use crate::codec::{Codec, Latent, STRIDE};
use crate::conditioning::{build_unet_input, resize_mask};
use crate::data_synth::warp::pseudo_warp;
use crate::data_synth::{augment_mask, garment_on_body, DataConfig, TryOnSample};
use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, Image, Mask};
use crate::nn::optim::RmsProp;
use crate::nn::ParamStore;
use crate::rng::{self, derive_seed, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Eps,
    V,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lambda_preserve: f64,
    pub lambda_min: f64,
    /// Share of final epochs trained on strongly re-warped garments.
    pub hard_aug_fraction: f64,
    pub hard_aug_strength: f64,
    pub mask_aug: bool,
    pub mask_aug_rmax: usize,
    pub prediction: Prediction,
    pub seed: u64,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub gt: GtConfig,
    #[serde(flatten)]
    pub model: DenoiserConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-4,
            epochs: 30,
            batch: 16,
            lambda_preserve: 1.0,
            lambda_min: 1.0,
            hard_aug_fraction: 1.0 / 6.0,
            hard_aug_strength: 2.0,
            mask_aug: true,
            mask_aug_rmax: 2,
            prediction: Prediction::Eps,
            seed: 0,
            max_steps: None,
            gt: GtConfig::default(),
            model: DenoiserConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        make_schedule(self.t_steps, self.beta_start, self.beta_end).map_err(|e| Error::Config(e.to_string()))?;
        if self.lambda_preserve < 0.0 || self.lambda_min < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("diffusion.batch and diffusion.epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_aug_fraction) {
            return Err(Error::Config("diffusion.hard_aug_fraction must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("diffusion.lr must be positive".into()));
        }
        self.gt.validate()?;
        self.model.validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_steps, self.beta_start, self.beta_end)
    }

    /// Number of trailing epochs that use hard augmentation.
    pub fn hard_epochs(&self) -> usize {
        (self.epochs as f64 * self.hard_aug_fraction).round() as usize
    }

    pub fn is_hard_epoch(&self, epoch: usize) -> bool {
        epoch + self.hard_epochs() >= self.epochs
    }
}

/// One line of `logs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "L_total")]
    pub l_total: f32,
    #[serde(rename = "L_dm")]
    pub l_dm: f32,
    #[serde(rename = "L_preserve")]
    pub l_preserve: f32,
    #[serde(rename = "L_min")]
    pub l_min: f32,
    pub mean_m_info: f32,
}

/// Codec outputs and masks for one sample, computed once because the codec is frozen.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub x0: Tensor,
    pub agnostic: Tensor,
    pub garment_lat: Tensor,
    pub m_w_lat: Tensor,
    pub gt: Tensor,
    pub garment_img: Tensor,
    pub m_a: Mask,
    pub m_f: Mask,
    pub m_s: Mask,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x0: Latent,
    pub agnostic: Latent,
    pub m_a: Tensor,
    pub m_f: Tensor,
    pub m_s: Tensor,
    pub garment_lat: Latent,
    pub m_w_lat: Tensor,
    pub gt: Tensor,
    pub garment_img: Tensor,
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub dm: Tensor,
    pub preserve: Tensor,
    pub min: Tensor,
    pub m_info: Tensor,
}

/// `(B, 4, h, w)` latents scaled to roughly unit variance, detached from the codec.
pub fn encode_scaled(codec: &Codec, images: &[&Image], scale: f64) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in images.chunks(32) {
        parts.push((codec.encode_images(chunk)?.tensor().detach() * scale)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

fn mask_tensor(m: &Mask, device: &Device) -> Result<Tensor> {
    m.to_tensor(DType::F32, device)
}

fn lat_mask(m: &Mask, device: &Device) -> Result<Tensor> {
    mask_tensor(&resize_mask(m, STRIDE)?, device)
}

/// `(E(G_w)·s, M_w at latent resolution, Laplacian ground truth)` for a batch.
pub fn garment_terms(
    codec: &Codec,
    scale: f64,
    warped: &[&Image],
    masks: &[&Mask],
    gt_cfg: &GtConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let device = Device::Cpu;
    let g = encode_scaled(codec, warped, scale)?;
    let mut mw = Vec::with_capacity(masks.len());
    let mut gts = Vec::with_capacity(masks.len());
    for (img, m) in warped.iter().zip(masks) {
        mw.push(lat_mask(m, &device)?);
        gts.push(mask_tensor(&laplacian_gt(img, m, gt_cfg)?, &device)?);
    }
    Ok((g, Tensor::cat(&mw, 0)?, Tensor::cat(&gts, 0)?))
}

pub fn prepare_samples(codec: &Codec, scale: f64, samples: &[TryOnSample], gt_cfg: &GtConfig) -> Result<Vec<PreparedSample>> {
    let device = Device::Cpu;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let persons: Vec<&Image> = chunk.iter().map(|s| &s.person).collect();
        let agn: Vec<&Image> = chunk.iter().map(|s| &s.agnostic_image).collect();
        let warped: Vec<&Image> = chunk.iter().map(|s| &s.warped_garment).collect();
        let wmasks: Vec<&Mask> = chunk.iter().map(|s| &s.warped_mask).collect();
        let x0 = encode_scaled(codec, &persons, scale)?;
        let a = encode_scaled(codec, &agn, scale)?;
        let (g, mw, gt) = garment_terms(codec, scale, &warped, &wmasks, gt_cfg)?;
        for (i, s) in chunk.iter().enumerate() {
            out.push(PreparedSample {
                x0: x0.narrow(0, i, 1)?,
                agnostic: a.narrow(0, i, 1)?,
                garment_lat: g.narrow(0, i, 1)?,
                m_w_lat: mw.narrow(0, i, 1)?,
                gt: gt.narrow(0, i, 1)?,
                garment_img: s.garment.to_tensor(DType::F32, &device)?,
                m_a: s.agnostic_mask.clone(),
                m_f: s.foreground_mask.clone(),
                m_s: s.skin_mask.clone(),
                seed: s.seed,
            });
        }
    }
    Ok(out)
}

/// Per-batch noise: timesteps uniform in `[0, T)` and standard-normal `eps`.
pub fn draw_noise(seed: u64, step: usize, dims: &[usize], t_max: usize) -> Result<(Vec<usize>, Latent)> {
    let mut r = rng::rng_from(seed, &[tag::NOISE, step as u64]);
    let t: Vec<usize> = (0..dims[0]).map(|_| r.random_range(0..t_max)).collect();
    let n: usize = dims.iter().product();
    let eps = Tensor::from_vec(rng::normal_vec(&mut r, n), dims, &Device::Cpu)?;
    Ok((t, Latent::new(eps)?))
}

pub fn dm_loss(pred: &Latent, target: &Latent) -> Result<Tensor> {
    Ok((pred.tensor() - target.tensor())?.sqr()?.mean_all()?)
}

fn per_sample(v: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let b = v.len();
    Ok(Tensor::from_vec(v, (b, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// Converts a network output to a noise estimate.
pub fn eps_from_prediction(pred: &Latent, x_t: &Latent, t: &[usize], sched: &NoiseSchedule, kind: Prediction) -> Result<Latent> {
    match kind {
        Prediction::Eps => Ok(pred.clone()),
        Prediction::V => {
            let a = per_sample(t.iter().map(|&s| sched.alpha_bars[s].sqrt()).collect(), x_t.tensor())?;
            let b = per_sample(t.iter().map(|&s| (1.0 - sched.alpha_bars[s]).sqrt()).collect(), x_t.tensor())?;
            Latent::new((pred.tensor().broadcast_mul(&a)? + x_t.tensor().broadcast_mul(&b)?)?)
        }
    }
}

fn v_target(x0: &Latent, eps: &Latent, t: &[usize], sched: &NoiseSchedule) -> Result<Latent> {
    let a = per_sample(t.iter().map(|&s| sched.alpha_bars[s].sqrt()).collect(), x0.tensor())?;
    let b = per_sample(t.iter().map(|&s| (1.0 - sched.alpha_bars[s]).sqrt()).collect(), x0.tensor())?;
    Latent::new((eps.tensor().broadcast_mul(&a)? - x0.tensor().broadcast_mul(&b)?)?)
}

/// All terms of the joint objective for one batch.
pub fn compute_losses(
    model: &Denoiser,
    sched: &NoiseSchedule,
    cfg: &DiffusionConfig,
    batch: &TrainBatch,
    t: &[usize],
    eps: &Latent,
) -> Result<LossTerms> {
    let dtype = batch.x0.tensor().dtype();
    let eps = Latent::new(eps.tensor().to_dtype(dtype)?)?;
    let x_t = q_sample(&batch.x0, t, &eps, sched)?;
    let input = build_unet_input(&x_t, &batch.agnostic, &batch.m_a, &batch.m_f, &batch.m_s)?;
    let cond = model.garment_condition(&batch.garment_lat, &batch.m_w_lat, &batch.garment_img)?;
    let pred = model.unet_forward(&input, t, &cond)?;
    let target = match cfg.prediction {
        Prediction::Eps => eps,
        Prediction::V => v_target(&batch.x0, &eps, t, sched)?,
    };
    let dm = dm_loss(&pred, &target)?;
    let preserve = l_preserve(&cond.m_info, &batch.gt)?;
    let min = l_min(&cond.m_info)?;
    let total = ((&dm + (&preserve * cfg.lambda_preserve)?)? + (&min * cfg.lambda_min)?)?;
    Ok(LossTerms {
        total,
        dm,
        preserve,
        min,
        m_info: cond.m_info,
    })
}

fn scalar(t: &Tensor) -> Result<f32> {
    Ok(t.to_dtype(DType::F32)?.to_scalar::<f32>()?)
}

/// The reported total, accumulated in the same order and precision as the tensor total.
pub fn reported_total(dm: f32, preserve: f32, min: f32, cfg: &DiffusionConfig) -> f32 {
    (dm + preserve * cfg.lambda_preserve as f32) + min * cfg.lambda_min as f32
}

/// Joint optimizer over UNet, auto-mask FPN and garment encoder; the codec stays frozen.
pub struct Trainer {
    pub cfg: DiffusionConfig,
    pub store: ParamStore,
    pub codec: Codec,
    pub model: Denoiser,
    pub sched: NoiseSchedule,
    pub latent_scale: f64,
    pub step: usize,
    opt: RmsProp,
}

impl Trainer {
    pub fn new(store: ParamStore, codec: Codec, latent_scale: f64, cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Denoiser::new(&store, &cfg.model)?;
        let opt = RmsProp::new(Denoiser::trainable_vars(&store), cfg.lr);
        Ok(Self {
            cfg: cfg.clone(),
            sched: cfg.schedule()?,
            store,
            codec,
            model,
            latent_scale,
            step: 0,
            opt,
        })
    }

    /// Stacks prepared samples, augmenting the body masks when enabled.
    pub fn assemble(&self, prepared: &[&PreparedSample], step: usize) -> Result<TrainBatch> {
        let device = Device::Cpu;
        let cat = |f: &dyn Fn(&PreparedSample) -> Tensor| -> Result<Tensor> {
            Ok(Tensor::cat(&prepared.iter().map(|p| f(p)).collect::<Vec<_>>(), 0)?)
        };
        let mut ma = Vec::new();
        let mut mf = Vec::new();
        let mut ms = Vec::new();
        for (i, p) in prepared.iter().enumerate() {
            let key = |t: u64| derive_seed(self.cfg.seed, &[t, step as u64, i as u64]);
            let (a, f, s) = if self.cfg.mask_aug {
                let r = self.cfg.mask_aug_rmax;
                (
                    augment_mask(&p.m_a, key(tag::MASK_AUG), r),
                    augment_mask(&p.m_f, key(tag::MASK_AUG_FOREGROUND), r),
                    augment_mask(&p.m_s, key(tag::MASK_AUG_SKIN), r),
                )
            } else {
                (p.m_a.clone(), p.m_f.clone(), p.m_s.clone())
            };
            ma.push(lat_mask(&a, &device)?);
            mf.push(lat_mask(&f, &device)?);
            ms.push(lat_mask(&s, &device)?);
        }
        Ok(TrainBatch {
            x0: Latent::new(cat(&|p| p.x0.clone())?)?,
            agnostic: Latent::new(cat(&|p| p.agnostic.clone())?)?,
            m_a: Tensor::cat(&ma, 0)?,
            m_f: Tensor::cat(&mf, 0)?,
            m_s: Tensor::cat(&ms, 0)?,
            garment_lat: Latent::new(cat(&|p| p.garment_lat.clone())?)?,
            m_w_lat: cat(&|p| p.m_w_lat.clone())?,
            gt: cat(&|p| p.gt.clone())?,
            garment_img: cat(&|p| p.garment_img.clone())?,
        })
    }

    /// Replaces the batch's warped garments by strongly re-warped versions.
    pub fn hard_augment(&self, batch: &mut TrainBatch, samples: &[&TryOnSample], data_cfg: &DataConfig, epoch: usize) -> Result<()> {
        let mut warped = Vec::with_capacity(samples.len());
        for s in samples {
            let (img, region) = garment_on_body(s, data_cfg);
            let seed = derive_seed(s.seed, &[tag::HARD_WARP, epoch as u64]);
            warped.push(pseudo_warp(&img, &region, seed, self.cfg.hard_aug_strength, &data_cfg.warp));
        }
        let imgs: Vec<&Image> = warped.iter().map(|w| &w.0).collect();
        let masks: Vec<&Mask> = warped.iter().map(|w| &w.1).collect();
        let (g, mw, gt) = garment_terms(&self.codec, self.latent_scale, &imgs, &masks, &self.cfg.gt)?;
        batch.garment_lat = Latent::new(g)?;
        batch.m_w_lat = mw;
        batch.gt = gt;
        Ok(())
    }

    pub fn losses(&self, batch: &TrainBatch, step: usize) -> Result<LossTerms> {
        let (t, eps) = draw_noise(self.cfg.seed, step, batch.x0.tensor().dims(), self.sched.t)?;
        compute_losses(&self.model, &self.sched, &self.cfg, batch, &t, &eps)
    }

    /// One optimizer step; returns the log line for it.
    pub fn train_step(&mut self, batch: &TrainBatch, epoch: usize) -> Result<LogLine> {
        let step = self.step;
        let terms = self.losses(batch, step)?;
        let (dm, p, m) = (scalar(&terms.dm)?, scalar(&terms.preserve)?, scalar(&terms.min)?);
        let total = scalar(&terms.total)?;
        if !total.is_finite() || !dm.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {total}"),
            });
        }
        let grads = terms.total.backward()?;
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(LogLine {
            step,
            epoch,
            l_total: reported_total(dm, p, m, &self.cfg),
            l_dm: dm,
            l_preserve: p,
            l_min: m,
            mean_m_info: scalar(&terms.m_info.mean_all()?)?,
        })
    }

    /// Sample order for `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::rng_from(self.cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        order
    }

    /// Full training over `samples`, starting at `start_epoch`.
    pub fn fit(
        &mut self,
        samples: &[TryOnSample],
        data_cfg: &DataConfig,
        start_epoch: usize,
        mut on_log: impl FnMut(&LogLine) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer, usize) -> Result<()>,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        let prepared = prepare_samples(&self.codec, self.latent_scale, samples, &self.cfg.gt)?;
        for epoch in start_epoch..self.cfg.epochs {
            let order = self.epoch_order(samples.len(), epoch);
            for idx in order.chunks(self.cfg.batch) {
                if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                    return on_epoch(self, epoch + 1);
                }
                let prep: Vec<&PreparedSample> = idx.iter().map(|&i| &prepared[i]).collect();
                let mut batch = self.assemble(&prep, self.step)?;
                if self.cfg.is_hard_epoch(epoch) {
                    let raw: Vec<&TryOnSample> = idx.iter().map(|&i| &samples[i]).collect();
                    self.hard_augment(&mut batch, &raw, data_cfg, epoch)?;
                }
                let line = self.train_step(&batch, epoch)?;
                on_log(&line)?;
            }
            on_epoch(self, epoch + 1)?;
        }
        Ok(())
    }
}

/// Convenience used by tests and the sampler: stacks images to a tensor.
pub fn stack_images(images: &[&Image]) -> Result<Tensor> {
    batch_to_tensor(images, DType::F32, &Device::Cpu)
}
