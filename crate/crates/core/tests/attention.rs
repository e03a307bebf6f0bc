mod common;

use candle_core::{DType, Device, IndexOp, Tensor};
use common::oracles::{full_attention_oracle, to_vec2};
use common::randn;
use proptest::prelude::*;
use warpdiff_core::attention::{
    local_cross_attention, mac_count, mac_count_full, window_attention, window_partition, window_reverse, AttentionParams,
};
use warpdiff_core::nn::{counter, ParamStore};

fn params(seed: u64, d: usize, heads: usize, kv: usize, dtype: DType) -> (ParamStore, AttentionParams) {
    let store = ParamStore::new(seed, dtype, Device::Cpu);
    let p = AttentionParams::new(&store.root().pp("a"), d, heads, kv).unwrap();
    (store, p)
}

#[test]
fn covering_window_matches_brute_force_full_attention() {
    let (h, w, c) = (8, 8, 16);
    let (_s, p) = params(3, c, 4, c, DType::F32);
    let x = randn(1, &[h, w, c], DType::F32);
    let g = randn(2, &[h, w, c], DType::F32);
    let mask = Tensor::ones((h, w), DType::F32, &Device::Cpu).unwrap();
    let got = local_cross_attention(&x, &g, &mask, 8, &p).unwrap();
    let xs = to_vec2(&x.reshape((h * w, c)).unwrap());
    let gs = to_vec2(&g.reshape((h * w, c)).unwrap());
    let want = full_attention_oracle(&xs, &gs, &p);
    let got = to_vec2(&got.reshape((h * w, c)).unwrap());
    let err = got
        .iter()
        .flatten()
        .zip(want.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-5, "max abs error {err}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let (_s, p) = params(4, 16, 4, 5, DType::F32);
    let x = randn(5, &[2, 12, 10, 16], DType::F32);
    let g = randn(6, &[2, 12, 10, 5], DType::F32);
    let mask = randn(7, &[2, 12, 10], DType::F32).ge(0.0).unwrap().to_dtype(DType::F32).unwrap();
    let wa = window_attention(&x, &g, &mask, 4, 4, &p, None).unwrap();
    let sums = wa.probs.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    for (i, s) in sums.iter().enumerate() {
        assert!((s - 1.0).abs() < 1e-5, "row {i} sums to {s}");
    }
}

#[test]
fn windows_do_not_see_each_other() {
    let (h, w, c, win) = (8, 8, 8, 4);
    let (_s, p) = params(8, c, 2, c, DType::F64);
    let x = randn(9, &[h, w, c], DType::F64);
    let g = randn(10, &[h, w, c], DType::F64);
    let mask = Tensor::ones((h, w), DType::F64, &Device::Cpu).unwrap();
    let base = local_cross_attention(&x, &g, &mask, win, &p).unwrap();
    // perturb the garment inside the bottom-right window only
    let bump = Tensor::zeros((h, w, c), DType::F64, &Device::Cpu)
        .unwrap()
        .slice_assign(&[4..8, 4..8, 0..c], &Tensor::ones((4, 4, c), DType::F64, &Device::Cpu).unwrap())
        .unwrap();
    let moved = local_cross_attention(&x, &(g + bump).unwrap(), &mask, win, &p).unwrap();
    let diff = (moved - &base).unwrap().abs().unwrap();
    for (ys, xs, changes) in [(0..4, 0..4, false), (0..4, 4..8, false), (4..8, 0..4, false), (4..8, 4..8, true)] {
        let d = diff.i((ys, xs)).unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d > 0.0, changes, "window change {d}");
    }
}

#[test]
fn masked_window_passes_features_through() {
    let (_s, p) = params(11, 8, 2, 5, DType::F32);
    let x = randn(12, &[8, 8, 8], DType::F32);
    let g = randn(13, &[8, 8, 5], DType::F32);
    let mut m = vec![1.0f32; 64];
    for y in 0..4 {
        for xx in 0..4 {
            m[y * 8 + xx] = 0.0;
        }
    }
    let mask = Tensor::from_vec(m, (8, 8), &Device::Cpu).unwrap();
    let out = local_cross_attention(&x, &g, &mask, 4, &p).unwrap();
    let same = (out.i((0..4, 0..4)).unwrap() - x.i((0..4, 0..4)).unwrap())
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
    assert_eq!(same, 0.0);
}

#[test]
fn measured_cost_ratio_is_twelve() {
    let (h, w, c) = (16, 12, 32);
    let (_s, p) = params(14, c, 4, c, DType::F32);
    let x = randn(15, &[1, h, w, c], DType::F32);
    let g = randn(16, &[1, h, w, c], DType::F32);
    let mask = Tensor::ones((1, h, w), DType::F32, &Device::Cpu).unwrap();
    let (_, full) = counter::measure(|| window_attention(&x, &g, &mask, h, w, &p, None).unwrap());
    let (_, local) = counter::measure(|| window_attention(&x, &g, &mask, 4, 4, &p, None).unwrap());
    assert_eq!(full, mac_count_full(h, w, c));
    assert_eq!(local, mac_count(h, w, c, 4));
    let ratio = full as f64 / local as f64;
    assert!((ratio / 12.0 - 1.0).abs() < 0.01, "ratio {ratio}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_then_reverse_is_identity(b in 1usize..3, h in 1usize..13, w in 1usize..11, c in 1usize..5, win in 1usize..6, seed in 0u64..1000) {
        let x = randn(seed, &[b, h, w, c], DType::F32);
        let (windows, layout) = window_partition(&x, win).unwrap();
        prop_assert_eq!(windows.dims(), &[b * layout.n_windows, win * win, c]);
        let back = window_reverse(&windows, &layout).unwrap();
        prop_assert_eq!(back.dims(), x.dims());
        let d = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        prop_assert_eq!(d, 0.0);
    }

    #[test]
    fn cost_grows_with_window_area(h in 1usize..40, w in 1usize..40, c in 1usize..64, win in 1usize..9) {
        let ph = h.div_ceil(win) * win;
        let pw = w.div_ceil(win) * win;
        prop_assert_eq!(mac_count(h, w, c, win), (2 * ph * pw * win * win * c) as u64);
    }

    #[test]
    fn attention_output_is_finite_and_rows_normalized(seed in 0u64..500, win in 1usize..5) {
        let (_s, p) = params(seed, 8, 2, 5, DType::F32);
        let x = randn(seed + 1, &[1, 6, 5, 8], DType::F32);
        let g = randn(seed + 2, &[1, 6, 5, 5], DType::F32);
        let mask = randn(seed + 3, &[1, 6, 5], DType::F32).ge(0.0).unwrap().to_dtype(DType::F32).unwrap();
        let wa = window_attention(&x, &g, &mask, win, win, &p, None).unwrap();
        let s = wa.probs.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        prop_assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-5));
        let o = wa.out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        prop_assert!(o.iter().all(|v| v.is_finite()));
    }
}
