//! Minimal network building blocks on top of candle tensors.

pub mod counter;
pub mod group_norm;
pub mod im2col;
pub mod layers;
pub mod optim;
pub mod params;
pub mod softmax;

pub use layers::{linear_nd, sigmoid, silu, upsample2x, upsample_to, Conv2d, GroupNorm, Linear, ResBlock};
pub use params::{Init, ParamStore, Scope};
