use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::Latent;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear betas from `beta_1` to `beta_t` over `t` steps.
pub fn make_schedule(t: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if t < 2 || !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(Error::Argument(format!(
            "schedule needs T >= 2 and 0 < beta_1 <= beta_T < 1 (got T={t}, {beta_1}, {beta_t})"
        )));
    }
    let betas: Vec<f64> = (0..t)
        .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (t - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        t,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.t {
            return Err(Error::Argument(format!("timestep {t} outside [0, {})", self.t)));
        }
        Ok(())
    }
}

fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let b = values.len();
    Ok(Tensor::from_vec(values.to_vec(), (b, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// `x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · eps`, with one timestep per batch element.
pub fn q_sample(x0: &Latent, t: &[usize], eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    let x = x0.tensor();
    if x.dims() != eps.tensor().dims() || t.len() != x.dim(0)? {
        return Err(Error::shape(format!(
            "q_sample of {:?} with noise {:?} and {} timesteps",
            x.dims(),
            eps.tensor().dims(),
            t.len()
        )));
    }
    for &s in t {
        sched.check_step(s)?;
    }
    let a: Vec<f64> = t.iter().map(|&s| sched.alpha_bars[s].sqrt()).collect();
    let b: Vec<f64> = t.iter().map(|&s| (1.0 - sched.alpha_bars[s]).sqrt()).collect();
    let out = (x.broadcast_mul(&per_sample(&a, x)?)? + eps.tensor().broadcast_mul(&per_sample(&b, x)?)?)?;
    Latent::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_values() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bars[0] - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!((s.betas[199] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn minimal_schedule() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas, vec![0.1, 0.2]);
        assert!((s.alpha_bars[1] - 0.72).abs() < 1e-12);
    }

    #[test]
    fn bad_arguments() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.01, 1.0).is_err());
    }
}
