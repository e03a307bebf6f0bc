mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::oracles::*;
use common::*;
use warpdiff_core::attention::LocalTextureAttention;
use warpdiff_core::diffusion::LossTerms;
use warpdiff_core::nn::{Conv2d, ParamStore};

#[test]
fn joint_loss_gradient_wrt_fpn() {
    let store = model_store();
    let names = names_with(&store, "automask.");
    assert_close("fpn / L_total", directional_check(&store, &names, |s| joint_losses(s).total, 100));
    let head = names_with(&store, "automask.head");
    assert_close("fpn head / L_total", directional_check(&store, &head, |s| joint_losses(s).total, 200));
}

#[test]
fn joint_loss_gradient_wrt_unet_and_garment_encoder() {
    let store = model_store();
    for prefix in ["unet.", "unet.attn_mid.", "garment_encoder.", "global_proj.", "time_embed."] {
        let names = names_with(&store, prefix);
        assert!(!names.is_empty(), "{prefix}");
        assert_close(prefix, directional_check(&store, &names, |s| joint_losses(s).total, 300));
    }
}

#[test]
fn fpn_receives_gradient_through_each_term() {
    let store = model_store();
    let names = names_with(&store, "automask.");
    for (term, pick) in [
        ("L_dm", (|t: LossTerms| t.dm) as fn(LossTerms) -> Tensor),
        ("L_preserve", |t: LossTerms| t.preserve),
        ("L_min", |t: LossTerms| t.min),
    ] {
        let (a, n) = directional_check(&store, &names, |s| pick(joint_losses(s)), 400);
        assert_close(term, (a, n));
    }
}

#[test]
fn strided_convolution_on_odd_maps() {
    let store = ParamStore::new(6, DType::F64, Device::Cpu);
    let x64 = randn(10, &[2, 3, 5, 6], DType::F64);
    let loss = |s: &ParamStore| {
        let conv = Conv2d::new(&s.root().pp("c"), 3, 4, 3, 2).unwrap();
        let y = conv.forward(&x64.to_dtype(s.dtype()).unwrap()).unwrap();
        let w = randn(11, y.dims(), s.dtype());
        (y.sqr().unwrap() * w).unwrap().sum_all().unwrap()
    };
    loss(&store);
    let names = names_with(&store, "c.");
    assert_close("conv", directional_check(&store, &names, loss, 500));
}

#[test]
fn local_attention_block() {
    let store = ParamStore::new(7, DType::F64, Device::Cpu);
    let loss = |s: &ParamStore| {
        let dt = s.dtype();
        let block = LocalTextureAttention::new(&s.root().pp("lta"), 16, 2, 5, 4, None).unwrap();
        let x = randn(12, &[1, 16, 6, 5], dt);
        let g = randn(13, &[1, 5, 6, 5], dt);
        let m = randn(14, &[1, 1, 6, 5], DType::F64).ge(-0.5).unwrap().to_dtype(dt).unwrap();
        let y = block.forward(&x, &g, &m, None).unwrap();
        (y.sqr().unwrap() * randn(15, &[1, 16, 6, 5], dt)).unwrap().sum_all().unwrap()
    };
    loss(&store);
    let names = names_with(&store, "lta.");
    assert_close("local attention", directional_check(&store, &names, loss, 600));
}

#[test]
fn attention_gradient_wrt_query_weights() {
    assert_close("W_q", attention_wq_check());
}

#[test]
fn checker_catches_a_wrong_gradient() {
    let store = ParamStore::new(8, DType::F64, Device::Cpu);
    store.get_or_init("p", &[3], warpdiff_core::nn::Init::Normal { std: 1.0 }).unwrap();
    // forward is p^3 but the graph only sees p^2 · detach(p)
    let loss = |s: &ParamStore| {
        let p = s.get("p").unwrap();
        let p: &Tensor = Var::as_tensor(&p);
        (p.sqr().unwrap() * p.detach()).unwrap().sum_all().unwrap()
    };
    let (a, n) = directional_check(&store, &["p".to_string()], loss, 700);
    assert!(rel_err(a, n) > 0.1);
}
