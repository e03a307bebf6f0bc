#![allow(dead_code)]

pub mod oracles;

use candle_core::{DType, Device, Tensor};
use warpdiff_core::codec::{Codec, CodecConfig};
use warpdiff_core::data_synth::{gen_sample, DataConfig, TryOnSample};
use warpdiff_core::diffusion::{DenoiserConfig, DiffusionConfig};

pub fn tiny_data() -> DataConfig {
    DataConfig {
        height: 32,
        width: 32,
        ..DataConfig::default()
    }
}

pub fn tiny_codec_cfg() -> CodecConfig {
    CodecConfig {
        widths: [8, 16],
        steps: 5,
        batch: 2,
        ..CodecConfig::default()
    }
}

pub fn tiny_model_cfg() -> DenoiserConfig {
    DenoiserConfig {
        widths: [8, 16, 16],
        window: 4,
        attn_levels: vec![0, 1, 2],
        n_heads: 2,
        global_token: false,
        mask_head_bias: 0.0,
    }
}

pub fn tiny_diffusion_cfg() -> DiffusionConfig {
    DiffusionConfig {
        t_steps: 20,
        batch: 2,
        epochs: 1,
        model: tiny_model_cfg(),
        ..DiffusionConfig::default()
    }
}

pub fn tiny_samples(n: usize, seed: u64) -> Vec<TryOnSample> {
    (0..n).map(|i| gen_sample(seed * 1000 + i as u64, &tiny_data()).unwrap()).collect()
}

pub fn randn(seed: u64, shape: &[usize], dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let mut r = warpdiff_core::rng::rng_from(seed, &[]);
    let v = warpdiff_core::rng::normal_vec_f64(&mut r, n);
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a.to_dtype(DType::F64).unwrap() - b.to_dtype(DType::F64).unwrap())
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

pub fn tiny_codec(store: &warpdiff_core::nn::ParamStore) -> Codec {
    Codec::new(store, &tiny_codec_cfg()).unwrap()
}
