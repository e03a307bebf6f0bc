mod common;

use candle_core::{DType, Device, Tensor};
use common::oracles::q_sample_moments;
use common::*;
use proptest::prelude::*;
use warpdiff_core::codec::Latent;
use warpdiff_core::diffusion::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointMeta};
use warpdiff_core::diffusion::unet::PREFIXES;
use warpdiff_core::diffusion::{
    dm_loss, initial_latent, make_schedule, prepare_samples, q_sample, reported_total, sample_from, sample_images,
    DiffusionConfig, Denoiser, NoiseSchedule, Prediction, SampleConditions, SampleConfig, SamplerMode, Trainer,
};
use warpdiff_core::nn::ParamStore;
use warpdiff_core::Error;

#[test]
fn q_sample_quarter_alpha_bar() {
    let sched = NoiseSchedule {
        t: 2,
        betas: vec![0.5, 0.5],
        alphas: vec![0.5, 0.5],
        alpha_bars: vec![0.5, 0.25],
    };
    let x0 = Latent::new(randn(1, &[1, 4, 3, 2], DType::F64)).unwrap();
    let eps = Latent::new(randn(2, &[1, 4, 3, 2], DType::F64)).unwrap();
    let xt = q_sample(&x0, &[1], &eps, &sched).unwrap();
    let want = ((x0.tensor() * 0.5).unwrap() + (eps.tensor() * 0.75f64.sqrt()).unwrap()).unwrap();
    assert!(max_abs_diff(xt.tensor(), &want) < 1e-15);
    assert!(matches!(q_sample(&x0, &[2], &eps, &sched), Err(Error::Argument(_))));
}

#[test]
fn q_sample_at_first_step_is_nearly_clean() {
    let sched = make_schedule(200, 1e-8, 0.02).unwrap();
    let x0 = Latent::new(randn(3, &[2, 4, 4, 3], DType::F64)).unwrap();
    let eps = Latent::new(randn(4, &[2, 4, 4, 3], DType::F64)).unwrap();
    let xt = q_sample(&x0, &[0, 0], &eps, &sched).unwrap();
    assert!(max_abs_diff(xt.tensor(), x0.tensor()) < 1e-3);
}

#[test]
fn q_sample_monte_carlo_moments() {
    for m in q_sample_moments(&[0, 50, 150, 199], 10_000) {
        assert!(m.mean_ok, "t={}: mean error {:.3e}", m.t, m.mean_err);
        assert!(m.var_rel_err < 0.02, "t={}: variance error {:.3e}", m.t, m.var_rel_err);
    }
}

#[test]
fn perfect_noise_prediction_has_zero_loss() {
    let eps = Latent::new(randn(6, &[3, 4, 4, 4], DType::F32)).unwrap();
    assert_eq!(dm_loss(&eps, &eps).unwrap().to_scalar::<f32>().unwrap(), 0.0);
}

fn tiny_trainer(cfg: &DiffusionConfig) -> (Trainer, Vec<warpdiff_core::data_synth::TryOnSample>) {
    let store = ParamStore::new(cfg.seed, DType::F32, Device::Cpu);
    let codec = tiny_codec(&store);
    (Trainer::new(store, codec, 1.0, cfg).unwrap(), tiny_samples(4, 7))
}

#[test]
fn reported_total_is_the_sum_of_reported_terms() {
    let cfg = tiny_diffusion_cfg();
    let (mut trainer, samples) = tiny_trainer(&cfg);
    let prepared = prepare_samples(&trainer.codec, 1.0, &samples, &cfg.gt).unwrap();
    let refs: Vec<_> = prepared.iter().take(2).collect();
    let batch = trainer.assemble(&refs, 0).unwrap();
    for _ in 0..3 {
        let line = trainer.train_step(&batch, 0).unwrap();
        assert_eq!(line.l_total, line.l_dm + line.l_preserve + line.l_min);
        assert_eq!(line.l_min, line.mean_m_info);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bars_strictly_decrease(t in 2usize..400, b1 in 1e-6f64..0.05, extra in 0.0f64..0.5) {
        let bt = (b1 + extra).min(0.999);
        let s = make_schedule(t, b1, bt).unwrap();
        prop_assert!((s.alpha_bars[0] - (1.0 - b1)).abs() < 1e-15);
        prop_assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn unweighted_total_is_additive(dm in 0f32..10.0, p in 0f32..1.0, m in 0f32..1.0) {
        let cfg = DiffusionConfig::default();
        prop_assert_eq!(reported_total(dm, p, m, &cfg), dm + p + m);
    }
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = tiny_model_cfg();
    let store = ParamStore::new(11, DType::F32, Device::Cpu);
    let model = Denoiser::new(&store, &cfg).unwrap();
    let meta = CheckpointMeta {
        kind: "diffusion".into(),
        config_hash: "abc".into(),
        epoch: 3,
        step: 42,
        latent_scale: 0.7,
        schedule: None,
    };
    save_checkpoint(&path, &meta, &store, &PREFIXES).unwrap();

    let (input, g, m, img) = warpdiff_core::diffusion::unet::probe_inputs(1, 8, 8, DType::F32, &Device::Cpu).unwrap();
    let input = (input + randn(12, &[1, 11, 8, 8], DType::F32)).unwrap();
    let g = Latent::new((g.tensor() + randn(13, &[1, 4, 8, 8], DType::F32)).unwrap()).unwrap();
    let m = (m + 1.0).unwrap();
    let out = |model: &Denoiser| {
        let c = model.garment_condition(&g, &m, &img).unwrap();
        model.unet_forward(&input, &[5], &c).unwrap().tensor().clone()
    };
    let before = out(&model);

    let other = ParamStore::new(99, DType::F32, Device::Cpu);
    let restored = Denoiser::new(&other, &cfg).unwrap();
    assert!(max_abs_diff(&out(&restored), &before) > 0.0);
    let got = load_checkpoint(&path, Some("abc"), &other).unwrap();
    assert_eq!(got, meta);
    assert_eq!(max_abs_diff(&out(&restored), &before), 0.0);

    assert!(matches!(load_checkpoint(&path, Some("other"), &other), Err(Error::Version { .. })));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    match read_checkpoint(&cut) {
        Err(Error::Io { source, .. }) => assert_eq!(source.kind(), std::io::ErrorKind::UnexpectedEof),
        other => panic!("expected an i/o error, got {other:?}"),
    }
}

fn sampling_setup() -> (Denoiser, warpdiff_core::codec::Codec, NoiseSchedule, SampleConditions) {
    let store = ParamStore::new(21, DType::F32, Device::Cpu);
    let codec = tiny_codec(&store);
    let model = Denoiser::new(&store, &tiny_model_cfg()).unwrap();
    let samples = tiny_samples(2, 3);
    let refs: Vec<_> = samples.iter().collect();
    let cond = SampleConditions::from_samples(&codec, 1.0, &refs, &Default::default()).unwrap();
    (model, codec, make_schedule(20, 1e-4, 0.02).unwrap(), cond)
}

#[test]
fn sampling_is_deterministic_and_preserves_the_agnostic_region() {
    let (model, codec, sched, cond) = sampling_setup();
    let cfg = SampleConfig {
        n_steps: 5,
        mode: SamplerMode::Ddpm,
        ..SampleConfig::default()
    };
    let a = sample_images(&model, &codec, 1.0, &sched, Prediction::Eps, &cond, &cfg).unwrap();
    let b = sample_images(&model, &codec, 1.0, &sched, Prediction::Eps, &cond, &cfg).unwrap();
    assert_eq!(a, b);
    for (img, (agn, m)) in a.iter().zip(cond.agnostic_images.iter().zip(&cond.agnostic_masks)) {
        for y in 0..img.height {
            for x in 0..img.width {
                if m.get(y, x, 0) == 0.0 {
                    assert_eq!(img.pixel(y, x), agn.pixel(y, x));
                }
            }
        }
    }
    let c = sample_images(&model, &codec, 1.0, &sched, Prediction::Eps, &cond, &SampleConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn ddim_is_noise_free_after_initialization() {
    let (model, _codec, sched, cond) = sampling_setup();
    let ddim = SampleConfig {
        n_steps: 20,
        mode: SamplerMode::Ddim,
        ..SampleConfig::default()
    };
    let init = initial_latent(&cond, &ddim).unwrap();
    let a = sample_from(&model, &sched, Prediction::Eps, &cond, &ddim, init.clone()).unwrap();
    let b = sample_from(&model, &sched, Prediction::Eps, &cond, &SampleConfig { seed: 77, ..ddim.clone() }, init.clone()).unwrap();
    assert_eq!(max_abs_diff(a.tensor(), b.tensor()), 0.0);
    let ddpm = SampleConfig {
        mode: SamplerMode::Ddpm,
        ..ddim.clone()
    };
    let c = sample_from(&model, &sched, Prediction::Eps, &cond, &ddpm, init.clone()).unwrap();
    let d = sample_from(&model, &sched, Prediction::Eps, &cond, &SampleConfig { seed: 77, ..ddpm }, init).unwrap();
    assert!(max_abs_diff(c.tensor(), d.tensor()) > 0.0);
}

#[test]
fn zero_mask_makes_attention_an_identity() {
    let store = ParamStore::new(31, DType::F32, Device::Cpu);
    let mut cfg = tiny_model_cfg();
    let model = Denoiser::new(&store, &cfg).unwrap();
    cfg.attn_levels.clear();
    let plain = Denoiser::new(&store, &cfg).unwrap();
    let (input, g, _m, img) = warpdiff_core::diffusion::unet::probe_inputs(2, 8, 8, DType::F32, &Device::Cpu).unwrap();
    let input = (input + randn(32, &[2, 11, 8, 8], DType::F32)).unwrap();
    let g = Latent::new((g.tensor() + randn(33, &[2, 4, 8, 8], DType::F32)).unwrap()).unwrap();
    let zeros = Tensor::zeros((2, 1, 8, 8), DType::F32, &Device::Cpu).unwrap();
    let with = model.garment_condition_with_mask(&g, zeros.clone(), &img).unwrap();
    let without = plain.garment_condition_with_mask(&g, zeros, &img).unwrap();
    let a = model.unet_forward(&input, &[3, 9], &with).unwrap();
    let b = plain.unet_forward(&input, &[3, 9], &without).unwrap();
    assert_eq!(a.tensor().dims(), &[2, 4, 8, 8]);
    assert_eq!(max_abs_diff(a.tensor(), b.tensor()), 0.0);
}
