use candle_core::{DType, Device, Tensor};
use warpdiff_core::attention::{local_cross_attention, AttentionParams};
use warpdiff_core::codec::Latent;
use warpdiff_core::diffusion::{compute_losses, make_schedule, q_sample, Denoiser, DiffusionConfig, LossTerms, TrainBatch};
use warpdiff_core::nn::ParamStore;

use super::{randn, tiny_diffusion_cfg};

pub const REL_TOL: f64 = 1e-3;
pub const STEP: f64 = 1e-4;

pub fn to_vec2(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

/// Plain-loop multi-head cross attention over all tokens.
pub fn full_attention_oracle(x: &[Vec<f64>], g: &[Vec<f64>], p: &AttentionParams) -> Vec<Vec<f64>> {
    let (wq, wk, wv, wo) = (to_vec2(&p.w_q), to_vec2(&p.w_k), to_vec2(&p.w_v), to_vec2(&p.w_out));
    let proj = |w: &[Vec<f64>], v: &[f64]| -> Vec<f64> { w.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect() };
    let q: Vec<Vec<f64>> = x.iter().map(|v| proj(&wq, v)).collect();
    let k: Vec<Vec<f64>> = g.iter().map(|v| proj(&wk, v)).collect();
    let vv: Vec<Vec<f64>> = g.iter().map(|v| proj(&wv, v)).collect();
    let dh = p.d_model / p.n_heads;
    let mut out = Vec::new();
    for qi in &q {
        let mut ctx = vec![0.0; p.d_model];
        for h in 0..p.n_heads {
            let r = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in vv.iter().enumerate() {
                for c in r.clone() {
                    ctx[c] += e[j] / z * vj[c];
                }
            }
        }
        out.push(proj(&wo, &ctx));
    }
    out
}

/// Compares the f32 analytic directional derivative with an f64 central difference.
///
/// `loss` builds the scalar objective from whatever parameters live in the
/// given store; `names` selects the parameters to perturb.
pub fn directional_check(store64: &ParamStore, names: &[String], loss: impl Fn(&ParamStore) -> Tensor, seed: u64) -> (f64, f64) {
    let store32 = store64.to_dtype(DType::F32).unwrap();
    let l32 = loss(&store32);
    let grads = l32.backward().unwrap();
    let mut analytic = 0.0;
    let mut dirs = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let v64 = store64.get(name).unwrap();
        let d = randn(seed + i as u64, v64.dims(), DType::F64);
        let g = grads
            .get(store32.get(name).unwrap().as_tensor())
            .map(|g| g.to_dtype(DType::F64).unwrap())
            .unwrap_or_else(|| d.zeros_like().unwrap());
        analytic += (g * &d).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        dirs.push((v64.clone(), v64.as_tensor().copy().unwrap(), d));
    }
    let shifted = |sign: f64| {
        for (var, base, d) in &dirs {
            var.set(&(base + (d * (sign * STEP)).unwrap()).unwrap()).unwrap();
        }
        loss(store64).to_scalar::<f64>().unwrap()
    };
    let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * STEP);
    for (var, base, _) in &dirs {
        var.set(base).unwrap();
    }
    (analytic, numeric)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(a.abs()).max(1e-12)
}

pub fn assert_close(what: &str, (a, n): (f64, f64)) {
    let r = rel_err(a, n);
    assert!(r < REL_TOL, "{what}: analytic {a:.9e} vs numeric {n:.9e} (rel {r:.2e})");
    assert!(n.abs() > 1e-8, "{what}: derivative vanished ({n:e})");
}

pub struct Moments {
    pub t: usize,
    /// Worst per-element deviation of the sample mean from `√ᾱ·x0`.
    pub mean_err: f64,
    pub mean_ok: bool,
    /// Relative deviation of the pooled variance from `1 − ᾱ`.
    pub var_rel_err: f64,
}

/// Monte-Carlo moments of `q_sample` over `n` draws of a fixed `x0`.
///
/// Means must lie within 2% of `√ᾱ·x0`; once the signal is small the 2% is
/// taken in absolute terms plus four standard errors `√((1 − ᾱ)/n)`.
pub fn q_sample_moments(ts: &[usize], n: usize) -> Vec<Moments> {
    let sched = make_schedule(200, 1e-4, 0.02).unwrap();
    let (c, h, w) = (4, 2, 2);
    let d = c * h * w;
    let x0_one: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 + i as f64 / 16.0 } else { -1.5 }).collect();
    let x0 = Tensor::from_vec(x0_one.repeat(n), (n, c, h, w), &Device::Cpu).unwrap();
    let eps = randn(5, &[n, c, h, w], DType::F64);
    let mut out = Vec::new();
    for &t in ts {
        let ab = sched.alpha_bars[t];
        let xt = q_sample(&Latent::new(x0.clone()).unwrap(), &vec![t; n], &Latent::new(eps.clone()).unwrap(), &sched).unwrap();
        let v = xt.tensor().reshape((n, d)).unwrap().to_vec2::<f64>().unwrap();
        let mut pooled_var = 0.0;
        let mut mean_err: f64 = 0.0;
        let mut mean_ok = true;
        for j in 0..d {
            let mean = v.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = v.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            pooled_var += var / d as f64;
            let want = ab.sqrt() * x0_one[j];
            let err = (mean - want).abs();
            mean_err = mean_err.max(err);
            let allowed = if t <= 50 {
                0.02 * want.abs()
            } else {
                0.02 + 4.0 * ((1.0 - ab) / n as f64).sqrt()
            };
            mean_ok &= err <= allowed;
        }
        out.push(Moments {
            t,
            mean_err,
            mean_ok,
            var_rel_err: (pooled_var / (1.0 - ab) - 1.0).abs(),
        });
    }
    out
}

pub fn names_with(store: &ParamStore, prefix: &str) -> Vec<String> {
    store.names().into_iter().filter(|n| n.starts_with(prefix)).collect()
}

pub fn batch(dtype: DType) -> TrainBatch {
    let (b, h, w) = (2, 8, 8);
    let bin = |seed| randn(seed, &[b, 1, h, w], DType::F64).ge(0.0).unwrap().to_dtype(dtype).unwrap();
    let gt = randn(7, &[b, 1, h, w], DType::F64).abs().unwrap().clamp(0.0, 1.0).unwrap().to_dtype(dtype).unwrap();
    TrainBatch {
        x0: Latent::new(randn(1, &[b, 4, h, w], dtype)).unwrap(),
        agnostic: Latent::new(randn(2, &[b, 4, h, w], dtype)).unwrap(),
        m_a: bin(3),
        m_f: bin(4),
        m_s: bin(5),
        garment_lat: Latent::new(randn(6, &[b, 4, h, w], dtype)).unwrap(),
        m_w_lat: Tensor::ones((b, 1, h, w), dtype, &Device::Cpu).unwrap(),
        gt,
        garment_img: (randn(8, &[b, 3, h * 4, w * 4], dtype) * 0.3).unwrap(),
    }
}

pub fn gradcheck_cfg() -> DiffusionConfig {
    let mut c = tiny_diffusion_cfg();
    // keeps every garment token clearly visible, away from the 0.5 cut
    c.model.mask_head_bias = 3.0;
    c
}

pub fn joint_losses(store: &ParamStore) -> LossTerms {
    let cfg = gradcheck_cfg();
    let model = Denoiser::new(store, &cfg.model).unwrap();
    let sched = make_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
    let dtype = store.dtype();
    let eps = Latent::new(randn(9, &[2, 4, 8, 8], dtype)).unwrap();
    compute_losses(&model, &sched, &cfg, &batch(dtype), &[3, 15], &eps).unwrap()
}

pub fn model_store() -> ParamStore {
    let store = ParamStore::new(5, DType::F64, Device::Cpu);
    Denoiser::new(&store, &gradcheck_cfg().model).unwrap();
    store
}

/// `(analytic, numeric)` directional derivatives of a weighted attention
/// output with respect to `W_q` on a 4×4×8 instance.
pub fn attention_wq_check() -> (f64, f64) {
    let store = ParamStore::new(17, DType::F64, Device::Cpu);
    let loss = |s: &ParamStore| {
        let dt = s.dtype();
        let p = AttentionParams::new(&s.root().pp("a"), 8, 2, 8).unwrap();
        let x = randn(40, &[4, 4, 8], dt);
        let g = randn(41, &[4, 4, 8], dt);
        let m = Tensor::ones((4, 4), dt, &Device::Cpu).unwrap();
        let y = local_cross_attention(&x, &g, &m, 2, &p).unwrap();
        (y * randn(42, &[4, 4, 8], dt)).unwrap().sum_all().unwrap()
    };
    loss(&store);
    let names = names_with(&store, "a.q.");
    assert!(!names.is_empty());
    directional_check(&store, &names, loss, 43)
}
