//! Local texture attention.
//!
//! Image features and spatially aligned garment features are tiled into the
//! same non-overlapping windows; each image window attends only to the
//! garment tokens of its own window. Garment tokens whose mask is below 0.5
//! (including zero padding) are excluded with a large negative logit, and a
//! window without any visible garment token returns its image features
//! unchanged.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax::softmax_last_dim;
use crate::nn::{counter, linear_nd, GroupNorm, Init, Linear, Scope};

pub const MASK_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLayout {
    pub batch: usize,
    /// Whether the partitioned input had a leading batch dimension.
    pub batched: bool,
    pub orig_h: usize,
    pub orig_w: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub channels: usize,
    /// Windows per image.
    pub n_windows: usize,
}

impl WindowLayout {
    pub fn new(batch: usize, h: usize, w: usize, c: usize, win_h: usize, win_w: usize) -> Result<Self> {
        if win_h == 0 || win_w == 0 {
            return Err(Error::Argument("window size must be at least 1".into()));
        }
        let pad_h = (win_h - h % win_h) % win_h;
        let pad_w = (win_w - w % win_w) % win_w;
        Ok(Self {
            batch,
            batched: true,
            orig_h: h,
            orig_w: w,
            win_h,
            win_w,
            pad_h,
            pad_w,
            channels: c,
            n_windows: ((h + pad_h) / win_h) * ((w + pad_w) / win_w),
        })
    }

    pub fn rows(&self) -> usize {
        (self.orig_h + self.pad_h) / self.win_h
    }

    pub fn cols(&self) -> usize {
        (self.orig_w + self.pad_w) / self.win_w
    }

    pub fn tokens_per_window(&self) -> usize {
        self.win_h * self.win_w
    }

    pub fn padded_tokens(&self) -> usize {
        (self.orig_h + self.pad_h) * (self.orig_w + self.pad_w)
    }
}

fn as_batched(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        3 => Ok((x.unsqueeze(0)?, false)),
        4 => Ok((x.clone(), true)),
        r => Err(Error::shape(format!("expected (H, W, C) or (B, H, W, C), got rank {r}"))),
    }
}

/// Square-window partition. See [`window_partition_rect`].
pub fn window_partition(x: &Tensor, w: usize) -> Result<(Tensor, WindowLayout)> {
    window_partition_rect(x, w, w)
}

/// Zero-pads bottom/right to window multiples and tiles row-major.
///
/// `(H, W, C)` → `(n, wh·ww, C)`, or `(B, H, W, C)` → `(B·n, wh·ww, C)` with
/// windows of image `b` at `b·n .. (b+1)·n`. Tokens inside a window are
/// row-major.
pub fn window_partition_rect(x: &Tensor, win_h: usize, win_w: usize) -> Result<(Tensor, WindowLayout)> {
    let (xb, batched) = as_batched(x)?;
    let (b, h, w, c) = xb.dims4()?;
    let mut layout = WindowLayout::new(b, h, w, c, win_h, win_w)?;
    layout.batched = batched;
    let mut p = xb;
    if layout.pad_h > 0 {
        p = p.pad_with_zeros(1, 0, layout.pad_h)?;
    }
    if layout.pad_w > 0 {
        p = p.pad_with_zeros(2, 0, layout.pad_w)?;
    }
    let (nh, nw) = (layout.rows(), layout.cols());
    let windows = p
        .reshape(vec![b, nh, win_h, nw, win_w, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b * nh * nw, win_h * win_w, c))?;
    Ok((windows, layout))
}

/// Exact inverse of [`window_partition_rect`]; strips the padding.
pub fn window_reverse(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let (n, t, c) = windows.dims3()?;
    let (b, nh, nw) = (layout.batch, layout.rows(), layout.cols());
    if n != b * layout.n_windows || t != layout.tokens_per_window() {
        return Err(Error::shape(format!(
            "windows {:?} do not match layout with {} windows of {} tokens (batch {b})",
            windows.dims(),
            layout.n_windows,
            layout.tokens_per_window()
        )));
    }
    let full = windows
        .reshape(vec![b, nh, nw, layout.win_h, layout.win_w, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b, nh * layout.win_h, nw * layout.win_w, c))?
        .narrow(1, 0, layout.orig_h)?
        .narrow(2, 0, layout.orig_w)?
        .contiguous()?;
    if layout.batched {
        Ok(full)
    } else {
        Ok(full.squeeze(0)?)
    }
}

/// Projection weights for one attention site. Query and output map
/// `d_model → d_model`; key and value map the garment feature width to `d_model`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub kv_dim: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    /// Optional projections of the global garment vector into one extra key/value token.
    pub global_kv: Option<(Tensor, Tensor)>,
}

impl AttentionParams {
    pub fn new(s: &Scope, d_model: usize, n_heads: usize, kv_dim: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let q = Init::FanIn { fan_in: d_model, gain: 1.0 };
        let kv = Init::FanIn { fan_in: kv_dim, gain: 1.0 };
        Ok(Self {
            d_model,
            n_heads,
            kv_dim,
            w_q: Linear::no_bias_init(&s.pp("q"), d_model, d_model, q)?,
            w_k: Linear::no_bias_init(&s.pp("k"), kv_dim, d_model, kv)?,
            w_v: Linear::no_bias_init(&s.pp("v"), kv_dim, d_model, kv)?,
            w_out: Linear::no_bias_init(&s.pp("out"), d_model, d_model, q)?,
            global_kv: None,
        })
    }

    pub fn with_global_token(mut self, s: &Scope, global_dim: usize) -> Result<Self> {
        let init = Init::FanIn { fan_in: global_dim, gain: 1.0 };
        self.global_kv = Some((
            Linear::no_bias_init(&s.pp("gk"), global_dim, self.d_model, init)?,
            Linear::no_bias_init(&s.pp("gv"), global_dim, self.d_model, init)?,
        ));
        Ok(self)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Raw per-window attention results before the identity fallback.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    /// `(N, T, d_model)` after the output projection.
    pub out: Tensor,
    /// `(N, heads, T, T_kv)` softmax weights.
    pub probs: Tensor,
    /// `(N, 1, 1)`: 1 where the window has at least one visible garment token.
    pub valid: Tensor,
    pub layout: WindowLayout,
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, t, d) = x.dims3()?;
    Ok(x.reshape((n, t, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

fn check_alignment(img: &Tensor, g: &Tensor, mask: &Tensor) -> Result<()> {
    let id = img.dims();
    let gd = g.dims();
    let md = mask.dims();
    let r = id.len();
    if gd.len() != r || md.len() != r - 1 || id[..r - 1] != gd[..r - 1] || id[..r - 1] != md[..] {
        return Err(Error::shape(format!(
            "image features {id:?}, garment features {gd:?} and garment mask {md:?} are not spatially aligned"
        )));
    }
    Ok(())
}

/// Windowed cross-attention on `(B, H, W, ·)` (or unbatched) inputs.
///
/// `global` is an optional `(B, global_dim)` vector used only when the
/// params carry global key/value projections.
pub fn window_attention(
    img: &Tensor,
    garment: &Tensor,
    garment_mask: &Tensor,
    win_h: usize,
    win_w: usize,
    p: &AttentionParams,
    global: Option<&Tensor>,
) -> Result<WindowAttention> {
    check_alignment(img, garment, garment_mask)?;
    let dtype = img.dtype();
    let (xw, layout) = window_partition_rect(img, win_h, win_w)?;
    let (gw, _) = window_partition_rect(&garment.to_dtype(dtype)?, win_h, win_w)?;
    let (mw, _) = window_partition_rect(&garment_mask.to_dtype(dtype)?.unsqueeze(D::Minus1)?, win_h, win_w)?;
    let (n, t, c) = xw.dims3()?;
    if c != p.d_model || gw.dim(2)? != p.kv_dim {
        return Err(Error::shape(format!(
            "feature widths ({c}, {}) do not match attention params ({}, {})",
            gw.dim(2)?,
            p.d_model,
            p.kv_dim
        )));
    }
    let heads = p.n_heads;
    let q = split_heads(&linear_nd(&xw, &p.w_q)?, heads)?;
    let mut k = linear_nd(&gw, &p.w_k)?;
    let mut v = linear_nd(&gw, &p.w_v)?;

    // (N, T) visibility of garment tokens; zero padding is never visible.
    let visible = mw.squeeze(D::Minus1)?.ge(0.5)?.to_dtype(dtype)?;
    let mut bias = ((visible.ones_like()? - &visible)? * MASK_LOGIT)?;
    let valid = visible.max_keepdim(D::Minus1)?.unsqueeze(D::Minus1)?;

    if let (Some((gk, gv)), Some(gvec)) = (&p.global_kv, global) {
        let b = layout.batch;
        let per = layout.n_windows;
        let expand = |w: &Tensor| -> Result<Tensor> {
            let e = gvec.to_dtype(dtype)?.matmul(&w.t()?)?;
            Ok(e.unsqueeze(1)?
                .broadcast_as((b, per, p.d_model))?
                .reshape((b * per, 1, p.d_model))?)
        };
        k = Tensor::cat(&[k, expand(gk)?], 1)?;
        v = Tensor::cat(&[v, expand(gv)?], 1)?;
        bias = Tensor::cat(&[bias, Tensor::zeros((n, 1), dtype, img.device())?], 1)?;
    }

    let k = split_heads(&k, heads)?;
    let v = split_heads(&v, heads)?;
    let scale = 1.0 / (p.d_head() as f64).sqrt();
    let logits = (counter::matmul(&q, &k.transpose(2, 3)?.contiguous()?)? * scale)?;
    let t_kv = bias.dim(1)?;
    let logits = logits.broadcast_add(&bias.reshape((n, 1, 1, t_kv))?)?;
    let probs = softmax_last_dim(&logits)?;
    let ctx = counter::matmul(&probs, &v)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, t, p.d_model))?;
    let out = linear_nd(&ctx, &p.w_out)?;
    Ok(WindowAttention {
        out,
        probs,
        valid,
        layout,
    })
}

/// Local cross-attention with the identity fallback for fully masked
/// windows. Shapes: image `(…, H, W, C)`, garment `(…, H, W, C_kv)`,
/// mask `(…, H, W)`; output matches the image.
pub fn local_cross_attention(
    img: &Tensor,
    garment: &Tensor,
    garment_mask: &Tensor,
    w: usize,
    p: &AttentionParams,
) -> Result<Tensor> {
    let wa = window_attention(img, garment, garment_mask, w, w, p, None)?;
    let (xw, _) = window_partition(img, w)?;
    let mixed = (wa.out.broadcast_mul(&wa.valid)? + xw.broadcast_mul(&(wa.valid.ones_like()? - &wa.valid)?)?)?;
    window_reverse(&mixed, &wa.layout)
}

/// Analytic multiply-accumulate count of the `QKᵀ` and `AV` products:
/// `2 · N_pad · w² · C`.
pub fn mac_count(h: usize, w: usize, c: usize, win: usize) -> u64 {
    mac_count_rect(h, w, c, win, win)
}

pub fn mac_count_rect(h: usize, w: usize, c: usize, win_h: usize, win_w: usize) -> u64 {
    let hp = h.div_ceil(win_h) * win_h;
    let wp = w.div_ceil(win_w) * win_w;
    2 * (hp * wp) as u64 * (win_h * win_w) as u64 * c as u64
}

/// Full (non-windowed) cross-attention: every query sees all `H·W` tokens.
pub fn mac_count_full(h: usize, w: usize, c: usize) -> u64 {
    mac_count_rect(h, w, c, h, w)
}

/// Attention site inside the denoiser: `x + valid ⊙ attn(norm(x), garment)`.
#[derive(Debug, Clone)]
pub struct LocalTextureAttention {
    norm: GroupNorm,
    pub params: AttentionParams,
    pub window: usize,
}

impl LocalTextureAttention {
    pub fn new(
        s: &Scope,
        channels: usize,
        n_heads: usize,
        kv_dim: usize,
        window: usize,
        global_dim: Option<usize>,
    ) -> Result<Self> {
        let mut params = AttentionParams::new(&s.pp("attn"), channels, n_heads, kv_dim)?;
        if let Some(d) = global_dim {
            params = params.with_global_token(&s.pp("attn"), d)?;
        }
        Ok(Self {
            norm: GroupNorm::new(&s.pp("norm"), channels, 8)?,
            params,
            window,
        })
    }

    /// `x`: `(B, C, h, w)`; `garment`: `(B, C_kv, h, w)`; `mask`: `(B, 1, h, w)`.
    pub fn forward(&self, x: &Tensor, garment: &Tensor, mask: &Tensor, global: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm.forward(x)?.permute((0, 2, 3, 1))?.contiguous()?;
        let g = garment.permute((0, 2, 3, 1))?.contiguous()?;
        let m = mask.squeeze(1)?;
        let wa = window_attention(&h, &g, &m, self.window, self.window, &self.params, global)?;
        let delta = window_reverse(&wa.out.broadcast_mul(&wa.valid)?, &wa.layout)?;
        Ok((x + delta.permute((0, 3, 1, 2))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn params(d: usize, kv: usize, heads: usize) -> (ParamStore, AttentionParams) {
        let store = ParamStore::new(9, DType::F64, Device::Cpu);
        let p = AttentionParams::new(&store.root(), d, heads, kv).unwrap();
        (store, p)
    }

    #[test]
    fn first_window_tokens_are_row_major() {
        let x = Tensor::arange(0f32, 16., &Device::Cpu).unwrap().reshape((4, 4, 1)).unwrap();
        let (wins, layout) = window_partition(&x, 2).unwrap();
        assert_eq!(wins.dims(), &[4, 4, 1]);
        assert_eq!(layout.n_windows, 4);
        let w0: Vec<f32> = wins.get(0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(w0, vec![0., 1., 4., 5.]);
        let w1: Vec<f32> = wins.get(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(w1, vec![2., 3., 6., 7.]);
    }

    #[test]
    fn unit_window_gives_one_token_per_window() {
        let x = Tensor::zeros((3, 5, 2), DType::F32, &Device::Cpu).unwrap();
        let (wins, layout) = window_partition(&x, 1).unwrap();
        assert_eq!(layout.n_windows, 15);
        assert_eq!(wins.dims(), &[15, 1, 2]);
    }

    #[test]
    fn padding_arithmetic() {
        let x = Tensor::zeros((16, 12, 3), DType::F32, &Device::Cpu).unwrap();
        let (_, layout) = window_partition(&x, 8).unwrap();
        assert_eq!((layout.pad_h, layout.pad_w, layout.n_windows), (0, 4, 4));
    }

    #[test]
    fn zero_window_is_an_argument_error() {
        let x = Tensor::zeros((4, 4, 1), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(window_partition(&x, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn reverse_rejects_inconsistent_layout() {
        let x = Tensor::zeros((4, 4, 2), DType::F32, &Device::Cpu).unwrap();
        let (wins, layout) = window_partition(&x, 2).unwrap();
        let bad = WindowLayout { n_windows: 3, ..layout };
        assert!(window_reverse(&wins, &bad).is_err());
        let y = window_reverse(&wins, &layout).unwrap();
        assert_eq!(y.dims(), &[4, 4, 2]);
        assert_eq!(y.dtype(), DType::F32);
    }

    #[test]
    fn constant_garment_gives_value_projection_everywhere() {
        let (_, p) = params(8, 8, 2);
        let dev = Device::Cpu;
        let img = Tensor::randn(0f64, 1.0, (6, 6, 8), &dev).unwrap();
        let c: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let g = Tensor::from_vec(c.clone(), (1, 1, 8), &dev).unwrap().broadcast_as((6, 6, 8)).unwrap().contiguous().unwrap();
        let m = Tensor::ones((6, 6), DType::F64, &dev).unwrap();
        let out = local_cross_attention(&img, &g, &m, 3, &p).unwrap();
        let cv = Tensor::from_vec(c, (8, 1), &dev).unwrap();
        let expect = p.w_out.matmul(&p.w_v.matmul(&cv).unwrap()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let got = out.reshape((36, 8)).unwrap().to_vec2::<f64>().unwrap();
        for row in got {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_garment_is_identity() {
        let (_, p) = params(8, 4, 2);
        let dev = Device::Cpu;
        let img = Tensor::randn(0f64, 1.0, (5, 7, 8), &dev).unwrap();
        let g = Tensor::randn(0f64, 1.0, (5, 7, 4), &dev).unwrap();
        let m = Tensor::zeros((5, 7), DType::F64, &dev).unwrap();
        let out = local_cross_attention(&img, &g, &m, 4, &p).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            img.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn spatial_mismatch_is_a_shape_error() {
        let (_, p) = params(8, 8, 2);
        let dev = Device::Cpu;
        let img = Tensor::zeros((4, 4, 8), DType::F64, &dev).unwrap();
        let g = Tensor::zeros((4, 3, 8), DType::F64, &dev).unwrap();
        let m = Tensor::zeros((4, 3), DType::F64, &dev).unwrap();
        assert!(matches!(local_cross_attention(&img, &g, &m, 2, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn mac_formula_examples() {
        assert_eq!(mac_count(16, 12, 32, 4), 196_608);
        assert_eq!(mac_count_full(16, 12, 32), 2_359_296);
        assert_eq!(mac_count_full(16, 12, 32) / mac_count(16, 12, 32, 4), 12);
        assert_eq!(mac_count(16, 12, 32, 1), 2 * 192 * 32);
    }

    #[test]
    fn heads_must_divide_width() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        assert!(AttentionParams::new(&store.root(), 10, 4, 4).is_err());
    }
}
