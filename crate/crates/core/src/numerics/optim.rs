//! AdamW with linear warmup followed by half-cycle cosine decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{decays, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { base_lr: 1e-4, weight_decay: 0.05, beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("{path}.base_lr"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{path}.weight_decay"), "must be non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{path}.{name}"), "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("{path}.eps"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if total_steps <= warmup_steps {
            return Err(Error::config(
                "optimizer.warmup",
                format!("total_steps ({total_steps}) must exceed warmup_steps ({warmup_steps})"),
            ));
        }
        Ok(LrSchedule { base_lr, warmup_steps, total_steps })
    }

    /// Learning rate applied at `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Per-parameter moment accumulators plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, schedule: LrSchedule) -> Self {
        OptimizerState { config, schedule, step: 0, moments: BTreeMap::new() }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// Applies one update to every parameter with a gradient and returns the
    /// learning rate that was used. Parameters without a gradient are left
    /// untouched and keep their moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<f64> {
        if self.step >= self.schedule.total_steps {
            return Err(Error::Invalid(format!(
                "adamw: step {} is past the schedule end ({})",
                self.step, self.schedule.total_steps
            )));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("adamw: gradient for unknown parameter `{name}`")))?;
            if p.numel() != g.len() {
                return Err(Error::shape(
                    "adamw",
                    format!("`{name}` has {} values but gradient has {}", p.numel(), g.len()),
                ));
            }
            if let Some(m) = self.moments.get(name) {
                if m.first.len() != g.len() {
                    return Err(Error::shape("adamw", format!("moment shape mismatch for `{name}`")));
                }
            }
        }

        let lr = self.schedule.lr_at(self.step);
        let AdamWConfig { weight_decay, beta1, beta2, eps, .. } = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let decay = decays(name, p);
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m.first[k] = beta1 * m.first[k] + (1.0 - beta1) * g[k];
                m.second[k] = beta2 * m.second[k] + (1.0 - beta2) * g[k] * g[k];
                if decay {
                    *w -= lr * weight_decay * *w;
                }
                let mhat = m.first[k] / bc1;
                let vhat = m.second[k] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-4, 10, 110).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(5) - 0.5e-4).abs() < 1e-20);
        assert_eq!(s.lr_at(10), 1e-4);
        assert!((s.lr_at(60) - 0.5e-4).abs() < 1e-18);
        assert!(s.lr_at(110).abs() < 1e-20);
    }

    #[test]
    fn schedule_rejects_no_decay_phase() {
        assert!(LrSchedule::new(1e-4, 10, 10).is_err());
        assert!(LrSchedule::new(1e-4, 10, 5).is_err());
    }

    #[test]
    fn single_scalar_step_matches_hand_computation() {
        let cfg = AdamWConfig { base_lr: 1e-3, weight_decay: 0.1, beta1: 0.9, beta2: 0.95, eps: 1e-8 };
        // No warmup so the very first step uses the full base rate.
        let mut opt = OptimizerState::new(cfg, LrSchedule::new(1e-3, 0, 100).unwrap());
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.5)).unwrap();
        let grads = BTreeMap::from([("w".to_string(), vec![1.0])]);
        let lr = opt.step(&mut store, &grads).unwrap();
        assert_eq!(lr, 1e-3);
        // m = 0.1, v = 0.05; bias-corrected m_hat = 1, v_hat = 1.
        let m_hat = (1.0 - 0.9) / (1.0 - 0.9);
        let v_hat: f64 = (1.0 - 0.95) / (1.0 - 0.95);
        let expected = 0.5 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((store.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let cfg = AdamWConfig { base_lr: 0.1, weight_decay: 0.5, beta1: 0.9, beta2: 0.95, eps: 1e-8 };
        let mut opt = OptimizerState::new(cfg, LrSchedule::new(0.1, 0, 10).unwrap());
        let mut store = ParamStore::new();
        store.insert("m", Tensor::matrix(1, 2, vec![2.0, -4.0]).unwrap()).unwrap();
        // Zero gradient: only the decay term moves the weights.
        let grads = BTreeMap::from([("m".to_string(), vec![0.0, 0.0])]);
        opt.step(&mut store, &grads).unwrap();
        let w = store.get("m").unwrap().data();
        assert!((w[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert!((w[1] + 4.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_gradient() {
        let mut opt = OptimizerState::new(AdamWConfig::default(), LrSchedule::new(1e-4, 1, 10).unwrap());
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[3])).unwrap();
        let grads = BTreeMap::from([("w".to_string(), vec![0.0; 2])]);
        assert!(opt.step(&mut store, &grads).is_err());
    }

    #[test]
    fn refuses_to_step_past_schedule() {
        let mut opt = OptimizerState::new(AdamWConfig::default(), LrSchedule::new(1e-4, 0, 1).unwrap());
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        let grads = BTreeMap::from([("w".to_string(), vec![1.0])]);
        opt.step(&mut store, &grads).unwrap();
        assert!(opt.step(&mut store, &grads).is_err());
    }
}
