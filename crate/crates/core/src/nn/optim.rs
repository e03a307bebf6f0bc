use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// RMSprop without momentum: `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g/(√v + ε)`.
pub struct RmsProp {
    vars: Vec<Var>,
    sq_avg: Vec<Option<Tensor>>,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl RmsProp {
    pub fn new(vars: Vec<Var>, lr: f64) -> Self {
        let n = vars.len();
        Self {
            vars,
            sq_avg: vec![None; n],
            lr,
            rho: 0.99,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, slot) in self.vars.iter().zip(self.sq_avg.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let g2 = g.sqr()?;
            let v = match slot.take() {
                Some(prev) => ((prev * self.rho)? + (g2 * (1.0 - self.rho))?)?,
                None => (g2 * (1.0 - self.rho))?,
            };
            let denom = (v.sqrt()? + self.eps)?;
            let update = (g.div(&denom)? * self.lr)?;
            var.set(&var.as_tensor().detach().sub(&update)?)?;
            *slot = Some(v);
        }
        Ok(())
    }
}

/// Adam, used for the codec's reconstruction objective.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Self {
        let n = vars.len();
        Self {
            vars,
            m: vec![None; n],
            v: vec![None; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..self.vars.len() {
            let var = &self.vars[i];
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.m[i].take() {
                Some(p) => ((p * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v[i].take() {
                Some(p) => ((p * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let mhat = (&m / bc1)?;
            let vhat = (&v / bc2)?;
            let update = ((mhat / (vhat.sqrt()? + self.eps)?)? * self.lr)?;
            var.set(&var.as_tensor().detach().sub(&update)?)?;
            self.m[i] = Some(m);
            self.v[i] = Some(v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn rmsprop_first_step_has_fixed_magnitude() {
        let x = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = RmsProp::new(vec![x.clone()], 0.01);
        opt.step(&grads).unwrap();
        // first step: g/sqrt(0.01 g²) = sign(g)·10
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((v[1] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let x = Var::new(&[3.0f64], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![x.clone()], 0.1);
        for _ in 0..200 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        assert!(x.as_tensor().to_vec1::<f64>().unwrap()[0].abs() < 0.1);
    }
}
