use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| {
            p.iter()
                .map(|(k, t)| (k.to_string(), vec![T::zero(); t.len()]))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);
        for (name, p) in params.iter_mut() {
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            let v = self
                .v
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if m.len() != p.len() || v.len() != p.len() {
                return Err(Error::shape("adam", &p.shape, &[m.len()]));
            }
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
                p.values[i] -= step_size * m[i] / denom;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TensorBuf;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let n = values.len();
        p.insert("x", TensorBuf::new(vec![n], values).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(vec![1.0, -2.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p).unwrap();
        assert_eq!(p.get("x").unwrap().values, vec![1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = store(vec![0.5, 0.5, 0.5]);
        let g = [3.0, -0.25, 1e-3];
        p.get_mut("x").unwrap().grad = g.to_vec();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &p);
        adam.step(&mut p).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let expect = 0.5 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((p.get("x").unwrap().values[i] - expect).abs() < 1e-12);
        }
        assert!(p.get("x").unwrap().grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn descends_on_quadratic() {
        let mut p = store(vec![1.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let f = |p: &ParamStore<f64>| p.get("x").unwrap().values[0].powi(2);
        let mut last = f(&p);
        for _ in 0..2 {
            let x = p.get("x").unwrap().values[0];
            p.get_mut("x").unwrap().grad[0] = 2.0 * x;
            adam.step(&mut p).unwrap();
            assert!(f(&p) < last);
            last = f(&p);
        }
    }
}
