//! Adam with bias correction, and a step-decay learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Piecewise-constant schedule: `lr(i) = initial_lr / decay_factor^floor(i / decay_every)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDecaySchedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub total_iters: u64,
}

impl Default for StepDecaySchedule {
    fn default() -> Self {
        StepDecaySchedule {
            initial_lr: 1e-4,
            decay_factor: 2.0,
            decay_every: 128_000,
            total_iters: 640_000,
        }
    }
}

impl StepDecaySchedule {
    pub fn lr_at(&self, iter: u64) -> f64 {
        let drops = iter / self.decay_every.max(1);
        self.initial_lr / self.decay_factor.powi(drops.min(i32::MAX as u64) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::contract("initial learning rate must be positive"));
        }
        if !(self.decay_factor >= 1.0) {
            return Err(Error::contract("decay factor must be at least 1"));
        }
        if self.decay_every == 0 {
            return Err(Error::contract("decay interval must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Restores a saved state.
    pub fn from_parts(step: u64, moments: BTreeMap<String, Moments>) -> Self {
        Adam {
            step,
            moments,
            ..Default::default()
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// One update of every parameter. Gradients are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .map_err(|_| Error::contract(format!("missing gradient for parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim(format!(
                    "gradient of `{name}` has shape {}, parameter has {}",
                    g.shape(),
                    p.shape()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        for (name, p) in params.iter_mut() {
            let g = grads.get_mut(name)?;
            let state = self.moments.entry(name.to_owned()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let values = p.data_mut();
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (i, gi) in g.data_mut().iter_mut().enumerate() {
                let gd = *gi as f64;
                let m_new = b1 * m[i] as f64 + (1.0 - b1) * gd;
                let v_new = b2 * v[i] as f64 + (1.0 - b2) * gd * gd;
                let m_hat = m_new / correction1;
                let v_hat = v_new / correction2;
                values[i] = (values[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
                m[i] = m_new as f32;
                v[i] = v_new as f32;
                *gi = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, value: f32) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::scalar(value));
        p
    }

    #[test]
    fn schedule_breakpoints() {
        let s = StepDecaySchedule::default();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(127_999), 1e-4);
        assert_eq!(s.lr_at(128_000), 5e-5);
        assert_eq!(s.lr_at(639_999), 6.25e-6);
    }

    #[test]
    fn first_step_closed_form() {
        for g in [3.0f32, -0.5, 1e-3, -2e-2] {
            let mut adam = Adam::new();
            let mut p = single("w", 0.0);
            let mut grads = single("w", g);
            adam.step(&mut p, &mut grads, 1e-4).unwrap();
            let delta = p.get("w").unwrap().data()[0] as f64;
            let g = g as f64;
            let expected = -1e-4 * g / (g.abs() + 1e-8);
            assert!(((delta - expected) / expected).abs() < 1e-6, "g={g} delta={delta}");
            if g.abs() >= 1e-2 {
                assert!((delta + 1e-4 * g.signum()).abs() < 1e-10);
            }
            assert_eq!(grads.get("w").unwrap().data()[0], 0.0);
            assert_eq!(adam.step_count(), 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut adam = Adam::new();
        let mut p = single("w", 0.7);
        for _ in 0..5 {
            let mut grads = single("w", 0.0);
            adam.step(&mut p, &mut grads, 1e-3).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut adam = Adam::new();
        let mut p = single("p", 1.0);
        let mut last = 1.0f32;
        for _ in 0..10 {
            let x = p.get("p").unwrap().data()[0];
            let mut grads = single("p", 2.0 * x);
            adam.step(&mut p, &mut grads, 1e-2).unwrap();
            let now = p.get("p").unwrap().data()[0].powi(2);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut adam = Adam::new();
        let mut p = single("layer.weight", 1.0);
        let mut grads = ParamStore::new();
        let err = adam.step(&mut p, &mut grads, 1e-4).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut adam = Adam::new();
        let mut p = single("w", 1.0);
        let mut grads = single("w", 1.0);
        assert!(adam.step(&mut p, &mut grads, 0.0).is_err());
    }
}
