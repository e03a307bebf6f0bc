//! Multiply-accumulate accounting for the attention matmuls.

use std::cell::Cell;

use candle_core::Tensor;

use crate::error::{Error, Result};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    MACS.with(|m| m.set(0));
}

pub fn read() -> u64 {
    MACS.with(|m| m.get())
}

/// Runs `f` and returns its result with the MACs counted while it ran.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}

/// Batched `a @ b` for `(..., m, k) × (..., k, n)` with identical leading
/// dims; adds `batch · m · k · n` to the thread's counter.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ad = a.dims();
    let bd = b.dims();
    if ad.len() < 2 || ad.len() != bd.len() || ad[..ad.len() - 2] != bd[..bd.len() - 2] {
        return Err(Error::shape(format!("counted matmul of {ad:?} and {bd:?}")));
    }
    let r = ad.len();
    let (m, k, n) = (ad[r - 2], ad[r - 1], bd[r - 1]);
    if bd[r - 2] != k {
        return Err(Error::shape(format!("inner dims differ: {ad:?} × {bd:?}")));
    }
    let batch: usize = ad[..r - 2].iter().product();
    MACS.with(|c| c.set(c.get() + (batch * m * k * n) as u64));
    Ok(a.matmul(b)?)
}
