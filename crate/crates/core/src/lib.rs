//! Conditioned latent diffusion for virtual try-on at desk scale.

pub mod attention;
pub mod automask;
pub mod codec;
pub mod conditioning;
pub mod data_synth;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod filters;
pub mod harness;
pub mod image;
pub mod nn;
pub mod rng;
pub mod tensor_io;

pub use error::{Error, Result};
