use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::codec::{self, Codec, Latent, STRIDE};
use crate::data_synth::dataset::load_all;
use crate::data_synth::{gen_sample, write_dataset, DatasetManifest, Split, TryOnSample};
use crate::diffusion::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ScheduleMeta};
use crate::diffusion::train::garment_terms;
use crate::diffusion::unet::PREFIXES;
use crate::diffusion::{sample_images, Denoiser, SampleConditions, Trainer};
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricReport, BENCH_TOLERANCE};
use crate::image::{tensor_to_batch, Image, Mask};
use crate::nn::ParamStore;
use crate::tensor_io::TensorBlob;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    MakeData,
    TrainCodec,
    Train,
    Sample,
    Eval,
    BenchAttn,
    VizMask,
}

#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Run directory; defaults to `paths.run_dir`.
    pub out: Option<PathBuf>,
    pub force: bool,
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn root(&self) -> &Path {
        &self.0
    }
    pub fn train_data(&self) -> PathBuf {
        self.0.join("data").join("train")
    }
    pub fn test_data(&self) -> PathBuf {
        self.0.join("data").join("test")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.0.join("checkpoints")
    }
    pub fn codec_ckpt(&self) -> PathBuf {
        self.checkpoints().join("codec.ckpt")
    }
    pub fn diffusion_ckpt(&self) -> PathBuf {
        self.checkpoints().join("diffusion.ckpt")
    }
    pub fn init_mask_iou(&self) -> PathBuf {
        self.0.join("mask_iou_init.json")
    }
    pub fn codec_logs(&self) -> PathBuf {
        self.0.join("codec_logs.jsonl")
    }
    pub fn logs(&self) -> PathBuf {
        self.0.join("logs.jsonl")
    }
    pub fn samples(&self) -> PathBuf {
        self.0.join("samples")
    }
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.json")
    }
    pub fn bench(&self) -> PathBuf {
        self.0.join("attn_bench.json")
    }
    pub fn viz(&self) -> PathBuf {
        self.0.join("viz")
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

fn write_json(p: &Path, v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    write_text(p, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let s = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

/// Refuses to replace `path` unless forced; with force, removes it.
fn claim(path: &Path, force: bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if !force {
        return Err(Error::Config(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    let r = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
    r.map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} not found; run `{what}` first", path.display())))
    }
}

/// Resolves the config: `--config`, else the run directory's resolved config, else defaults.
pub fn resolve(inv: &Invocation) -> Result<(RunConfig, RunDir)> {
    let first = RunConfig::load(inv.config.as_deref(), &inv.overrides)?;
    let dir = inv.out.clone().unwrap_or_else(|| first.paths.run_dir.clone());
    let saved = dir.join("config.resolved");
    let mut cfg = if inv.config.is_none() && saved.exists() {
        RunConfig::load(Some(&saved), &inv.overrides)?
    } else {
        first
    };
    cfg.paths.run_dir = dir.clone();
    Ok((cfg, RunDir(dir)))
}

fn record_config(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    mkdir(dir.root())?;
    write_text(&dir.root().join("config.resolved"), &cfg.to_toml()?)?;
    write_text(&dir.root().join("config.hash"), &format!("{}\n", cfg.hash()?))
}

pub fn run(command: Command, inv: &Invocation) -> Result<()> {
    let (cfg, dir) = resolve(inv)?;
    match command {
        Command::MakeData => make_data(&cfg, &dir, inv.force),
        Command::TrainCodec => train_codec(&cfg, &dir, inv.force),
        Command::Train => train(&cfg, &dir, inv.force),
        Command::Sample => sample(&cfg, &dir, inv.force),
        Command::Eval => eval(&cfg, &dir, inv.force).map(|_| ()),
        Command::BenchAttn => bench_attn(&cfg, &dir, inv.force),
        Command::VizMask => viz_mask(&cfg, &dir, inv.force),
    }
}

pub fn make_data(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<()> {
    claim(&dir.root().join("data"), force)?;
    record_config(cfg, dir)?;
    for (split, root, n) in [
        (Split::Train, dir.train_data(), cfg.data.count),
        (Split::Test, dir.test_data(), cfg.data.test_count),
    ] {
        let samples = (0..n)
            .map(|i| gen_sample(cfg.data.sample_seed(split == Split::Test, i), &cfg.data.synth))
            .collect::<Result<Vec<_>>>()?;
        write_dataset(&samples, &root, split, Some(&cfg.data.synth))?;
    }
    log::info!("wrote {} train and {} test samples", cfg.data.count, cfg.data.test_count);
    Ok(())
}

fn load_split(cfg: &RunConfig, root: &Path) -> Result<Vec<TryOnSample>> {
    require(&root.join("manifest.json"), "make-data")?;
    let manifest = DatasetManifest::load(root)?;
    if manifest.data_config.as_ref() != Some(&cfg.data.synth) {
        return Err(Error::Config(format!(
            "dataset at {} was generated with a different data config; rerun make-data",
            root.display()
        )));
    }
    Ok(load_all(root)?.1)
}

fn jsonl(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn append(f: &mut fs::File, path: &Path, v: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn train_codec(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<()> {
    let samples = load_split(cfg, &dir.train_data())?;
    claim(&dir.codec_ckpt(), force)?;
    record_config(cfg, dir)?;
    mkdir(&dir.checkpoints())?;
    let images: Vec<&Image> = samples
        .iter()
        .flat_map(|s| [&s.person, &s.agnostic_image, &s.warped_garment])
        .collect();
    let store = ParamStore::new(cfg.codec.seed, DType::F32, Device::Cpu);
    let log_path = dir.codec_logs();
    let mut log = jsonl(&log_path)?;
    let mut io_err = None;
    let report = codec::train_codec(&store, &images, &cfg.codec, |line| {
        if io_err.is_none() {
            io_err = append(&mut log, &log_path, line).err();
        }
        if line.step % 100 == 0 {
            log::info!("codec step {} loss {:.5}", line.step, line.loss);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let meta = CheckpointMeta {
        kind: "codec".into(),
        config_hash: cfg.codec_hash()?,
        epoch: 0,
        step: cfg.codec.steps,
        latent_scale: report.latent_scale,
        schedule: None,
    };
    save_checkpoint(&dir.codec_ckpt(), &meta, &store, &[codec::PREFIX])
}

/// Frozen codec loaded from this run, plus its latent scale.
pub fn load_codec(cfg: &RunConfig, dir: &RunDir, store: &ParamStore) -> Result<(Codec, f64)> {
    require(&dir.codec_ckpt(), "train-codec")?;
    let codec = Codec::new(store, &cfg.codec)?;
    let meta = load_checkpoint(&dir.codec_ckpt(), Some(&cfg.codec_hash()?), store).map_err(|e| match e {
        Error::Version { .. } => Error::Config(format!("codec checkpoint does not match the config ({e}); rerun train-codec")),
        other => other,
    })?;
    Ok((codec, meta.latent_scale))
}

/// Codec and denoiser sharing one store, with the trained weights loaded.
pub fn load_model(cfg: &RunConfig, dir: &RunDir) -> Result<(ParamStore, Codec, Denoiser, CheckpointMeta)> {
    require(&dir.diffusion_ckpt(), "train")?;
    let store = ParamStore::new(cfg.diffusion.seed, DType::F32, Device::Cpu);
    let codec = Codec::new(&store, &cfg.codec)?;
    let model = Denoiser::new(&store, &cfg.diffusion.model)?;
    let meta = load_checkpoint(&dir.diffusion_ckpt(), Some(&cfg.model_hash()?), &store)?;
    Ok((store, codec, model, meta))
}

/// IoU between thresholded `m_info` and the Laplacian target for each sample.
pub fn mask_ious(model: &Denoiser, codec: &Codec, scale: f64, samples: &[TryOnSample], cfg: &RunConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let warped: Vec<&Image> = chunk.iter().map(|s| &s.warped_garment).collect();
        let masks: Vec<&Mask> = chunk.iter().map(|s| &s.warped_mask).collect();
        let (g, mw, gt) = garment_terms(codec, scale, &warped, &masks, &cfg.diffusion.gt)?;
        let m = model.predict_mask(&Latent::new(g)?, &mw)?.detach();
        for (p, t) in tensor_to_batch(&m)?.iter().zip(tensor_to_batch(&gt)?.iter()) {
            out.push(evaluation::mask_iou(p, t, cfg.eval.mask_threshold)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitMaskIou {
    pub values: Vec<f64>,
    pub mean: f64,
}

pub fn train(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<()> {
    require(&dir.codec_ckpt(), "train-codec")?;
    let samples = load_split(cfg, &dir.train_data())?;
    let test = load_split(cfg, &dir.test_data())?;
    claim(&dir.diffusion_ckpt(), force)?;
    claim(&dir.logs(), force)?;
    record_config(cfg, dir)?;
    let store = ParamStore::new(cfg.diffusion.seed, DType::F32, Device::Cpu);
    let (codec, scale) = load_codec(cfg, dir, &store)?;
    let mut trainer = Trainer::new(store, codec, scale, &cfg.diffusion)?;

    let held_out = &test[..cfg.eval.n_samples];
    let init = mask_ious(&trainer.model, &trainer.codec, scale, held_out, cfg)?;
    let report = MetricReport::new("mask_iou_init", init, serde_json::json!({}));
    write_json(&dir.init_mask_iou(), &InitMaskIou { mean: report.mean, values: report.values })?;

    let log_path = dir.logs();
    let mut log = jsonl(&log_path)?;
    let model_hash = cfg.model_hash()?;
    let ckpt = dir.diffusion_ckpt();
    let sched_meta = ScheduleMeta {
        t: cfg.diffusion.t_steps,
        beta_start: cfg.diffusion.beta_start,
        beta_end: cfg.diffusion.beta_end,
    };
    let mut prefixes = vec![codec::PREFIX];
    prefixes.extend(PREFIXES);
    trainer.fit(
        &samples,
        &cfg.data.synth,
        0,
        |line| {
            if line.step % 50 == 0 {
                log::info!(
                    "step {} epoch {} L_dm {:.4} L_preserve {:.4} L_min {:.4}",
                    line.step,
                    line.epoch,
                    line.l_dm,
                    line.l_preserve,
                    line.l_min
                );
            }
            append(&mut log, &log_path, line)
        },
        |t, epoch| {
            let meta = CheckpointMeta {
                kind: "diffusion".into(),
                config_hash: model_hash.clone(),
                epoch,
                step: t.step,
                latent_scale: t.latent_scale,
                schedule: Some(sched_meta.clone()),
            };
            save_checkpoint(&ckpt, &meta, &t.store, &prefixes)
        },
    )
}

fn to_rgb8(img: &Image) -> image::RgbImage {
    image::RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let px = |c: usize| {
            let c = if img.channels == 1 { 0 } else { c };
            (img.get(y as usize, x as usize, c).clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub fn sample(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<()> {
    let test = load_split(cfg, &dir.test_data())?;
    let (_, codec, model, meta) = load_model(cfg, dir)?;
    claim(&dir.samples(), force)?;
    record_config(cfg, dir)?;
    mkdir(&dir.samples())?;
    let sched = cfg.diffusion.schedule()?;
    let held_out = &test[..cfg.eval.n_samples];
    for (ci, chunk) in held_out.chunks(cfg.sample.batch).enumerate() {
        let refs: Vec<&TryOnSample> = chunk.iter().collect();
        let cond = SampleConditions::from_samples(&codec, meta.latent_scale, &refs, &cfg.diffusion.gt)?;
        let images = sample_images(&model, &codec, meta.latent_scale, &sched, cfg.diffusion.prediction, &cond, &cfg.sample)?;
        for (j, img) in images.iter().enumerate() {
            let id = crate::data_synth::dataset::sample_id(ci * cfg.sample.batch + j);
            img.to_blob().save(&dir.samples().join(format!("{id}.bin")))?;
            save_png(&to_rgb8(img), &dir.samples().join(format!("{id}.png")))?;
        }
        log::info!("sampled {} / {}", (ci * cfg.sample.batch + chunk.len()), held_out.len());
    }
    Ok(())
}

pub fn load_samples(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<Image>> {
    (0..cfg.eval.n_samples)
        .map(|i| {
            let p = dir.samples().join(format!("{}.bin", crate::data_synth::dataset::sample_id(i)));
            require(&p, "sample")?;
            Image::from_blob(TensorBlob::load(&p)?)
        })
        .collect()
}

/// Headline numbers written next to the per-sample reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub masked_ssim: Option<f64>,
    pub masked_ssim_paste: Option<f64>,
    pub toy_fid: Option<f64>,
    pub toy_fid_paste: Option<f64>,
    pub masked_l1: Option<f64>,
    pub masked_l1_paste: Option<f64>,
    pub mask_iou: Option<f64>,
    pub mask_iou_init: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub summary: EvalSummary,
    pub reports: Vec<MetricReport>,
}

fn features(codec: &Codec, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for chunk in images.chunks(32) {
        let x = crate::image::batch_to_tensor(chunk, DType::F32, &Device::Cpu)?;
        let f = codec.pooled_features(&x)?.detach().to_dtype(DType::F64)?;
        out.extend(f.to_vec2::<f64>()?);
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<EvalSummary> {
    let test = load_split(cfg, &dir.test_data())?;
    let held_out = &test[..cfg.eval.n_samples];
    let outputs = load_samples(cfg, dir)?;
    let (_, codec, model, meta) = load_model(cfg, dir)?;
    claim(&dir.metrics(), force)?;
    record_config(cfg, dir)?;
    let pastes = held_out
        .iter()
        .map(|s| evaluation::paste_baseline(&s.agnostic_image, &s.warped_garment, &s.warped_mask))
        .collect::<Result<Vec<_>>>()?;
    let want = |m: &str| cfg.eval.metrics.iter().any(|x| x == m);
    let ssim_cfg = serde_json::json!({
        "window": evaluation::SSIM_WINDOW, "sigma": evaluation::SSIM_SIGMA,
        "k1": evaluation::SSIM_K1, "k2": evaluation::SSIM_K2, "region": "agnostic_mask",
    });
    let mut reports = Vec::new();
    let mut summary = EvalSummary {
        masked_ssim: None,
        masked_ssim_paste: None,
        toy_fid: None,
        toy_fid_paste: None,
        masked_l1: None,
        masked_l1_paste: None,
        mask_iou: None,
        mask_iou_init: None,
    };
    let per_sample = |imgs: &[Image], f: &dyn Fn(&Image, &TryOnSample) -> Result<f64>| -> Result<Vec<f64>> {
        imgs.iter().zip(held_out).map(|(i, s)| f(i, s)).collect()
    };
    if want("ssim") {
        let f = |i: &Image, s: &TryOnSample| evaluation::masked_ssim(i, &s.person, &s.agnostic_mask);
        let a = MetricReport::new("masked_ssim", per_sample(&outputs, &f)?, ssim_cfg.clone());
        let b = MetricReport::new("masked_ssim_paste", per_sample(&pastes, &f)?, ssim_cfg);
        summary.masked_ssim = Some(a.mean);
        summary.masked_ssim_paste = Some(b.mean);
        reports.extend([a, b]);
    }
    if want("masked_l1") {
        let f = |i: &Image, s: &TryOnSample| evaluation::masked_l1(i, &s.person, &s.agnostic_mask);
        let c = serde_json::json!({ "region": "agnostic_mask" });
        let a = MetricReport::new("masked_l1", per_sample(&outputs, &f)?, c.clone());
        let b = MetricReport::new("masked_l1_paste", per_sample(&pastes, &f)?, c);
        summary.masked_l1 = Some(a.mean);
        summary.masked_l1_paste = Some(b.mean);
        reports.extend([a, b]);
    }
    if want("toy_fid") {
        let real = features(&codec, &held_out.iter().map(|s| &s.person).collect::<Vec<_>>())?;
        let fake = features(&codec, &outputs.iter().collect::<Vec<_>>())?;
        let paste = features(&codec, &pastes.iter().collect::<Vec<_>>())?;
        let c = serde_json::json!({ "features": "codec_pooled", "dim": real[0].len() });
        let a = evaluation::toy_fid(&fake, &real)?;
        let b = evaluation::toy_fid(&paste, &real)?;
        summary.toy_fid = Some(a);
        summary.toy_fid_paste = Some(b);
        reports.push(MetricReport::new("toy_fid", vec![a], c.clone()));
        reports.push(MetricReport::new("toy_fid_paste", vec![b], c));
    }
    if want("mask_iou") {
        let c = serde_json::json!({ "threshold": cfg.eval.mask_threshold });
        let ious = mask_ious(&model, &codec, meta.latent_scale, held_out, cfg)?;
        let a = MetricReport::new("mask_iou", ious, c.clone());
        summary.mask_iou = Some(a.mean);
        reports.push(a);
        if dir.init_mask_iou().exists() {
            let init: InitMaskIou = read_json(&dir.init_mask_iou())?;
            let b = MetricReport::new("mask_iou_init", init.values, c);
            summary.mask_iou_init = Some(b.mean);
            reports.push(b);
        }
    }
    write_json(&dir.metrics(), &MetricsFile { summary: summary.clone(), reports })?;
    Ok(summary)
}

pub fn bench_attn(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<()> {
    claim(&dir.bench(), force)?;
    record_config(cfg, dir)?;
    let report = evaluation::bench_attention(&cfg.eval.bench_grid, cfg.diffusion.seed)?;
    report.save(&dir.bench())?;
    for e in &report.entries {
        log::info!(
            "{}x{}x{} w={:?}: analytic {} measured {} ({:.3} ms)",
            e.case.hl,
            e.case.wl,
            e.case.c,
            e.case.w,
            e.analytic_macs,
            e.measured_macs,
            e.wall_time_ms
        );
    }
    if let Some(bad) = report.entries.iter().find(|e| e.relative_error() > BENCH_TOLERANCE) {
        return Err(Error::Argument(format!(
            "measured MACs {} deviate from the analytic count {} for {:?}",
            bad.measured_macs, bad.analytic_macs, bad.case
        )));
    }
    Ok(())
}

fn upscale(m: &Mask, f: usize) -> Mask {
    let mut out = Mask::mask(m.height * f, m.width * f);
    for y in 0..out.height {
        for x in 0..out.width {
            out.set(y, x, 0, m.get(y / f, x / f, 0));
        }
    }
    out
}

/// Warped garment, Laplacian target and predicted mask side by side.
pub fn triptych(warped: &Image, gt: &Mask, m_info: &Mask, zoom: usize) -> image::RgbImage {
    let panels = [to_rgb8(warped), to_rgb8(&upscale(gt, STRIDE)), to_rgb8(&upscale(m_info, STRIDE))];
    let (w, h) = (warped.width as u32, warped.height as u32);
    let z = zoom as u32;
    image::RgbImage::from_fn(3 * w * z, h * z, |x, y| {
        let (px, py) = (x / z, y / z);
        *panels[(px / w) as usize].get_pixel(px % w, py)
    })
}

pub fn viz_mask(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<()> {
    let test = load_split(cfg, &dir.test_data())?;
    let (_, codec, model, meta) = load_model(cfg, dir)?;
    claim(&dir.viz(), force)?;
    record_config(cfg, dir)?;
    mkdir(&dir.viz())?;
    let held_out = &test[..cfg.eval.n_samples];
    for (ci, chunk) in held_out.chunks(32).enumerate() {
        let warped: Vec<&Image> = chunk.iter().map(|s| &s.warped_garment).collect();
        let masks: Vec<&Mask> = chunk.iter().map(|s| &s.warped_mask).collect();
        let (g, mw, gt) = garment_terms(&codec, meta.latent_scale, &warped, &masks, &cfg.diffusion.gt)?;
        let m: Tensor = model.predict_mask(&Latent::new(g)?, &mw)?.detach();
        let (m, gt) = (tensor_to_batch(&m)?, tensor_to_batch(&gt)?);
        for (j, s) in chunk.iter().enumerate() {
            let id = crate::data_synth::dataset::sample_id(ci * 32 + j);
            save_png(&triptych(&s.warped_garment, &gt[j], &m[j], 4), &dir.viz().join(format!("{id}.png")))?;
        }
    }
    Ok(())
}
