//! AdamW with decoupled weight decay, and the warmup + cosine-decay
//! learning-rate schedule.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;
#[cfg(not(feature = "std"))] // inherent f64 methods replace this under std
use num_traits::Float as _;
use crate::{CoreError, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state: first/second moments per learnable parameter plus the
/// shared step counter (incremented exactly once per `step`).
pub struct AdamW<T: Real> {
    pub cfg: AdamWConfig,
    slots: Vec<Option<Slot<T>>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let slots = store
            .iter()
            .map(|(_, p)| {
                p.learnable.then(|| Slot {
                    m: vec![T::zero(); p.tensor.len()],
                    v: vec![T::zero(); p.tensor.len()],
                })
            })
            .collect();
        Self { cfg, slots, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², bias-corrected,
    /// then θ ← θ − lr·m̂/(√v̂+ε) − lr·wd·θ (decoupled decay).
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, &[T])],
        lr: f64,
    ) -> Result<()> {
        for (id, g) in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                let _ = i;
                return Err(CoreError::NonFiniteGrad {
                    param: store.get(*id).name.clone(),
                });
            }
        }
        self.t += 1;
        let b1 = T::fr(self.cfg.beta1);
        let b2 = T::fr(self.cfg.beta2);
        let one = T::one();
        let inv_bc1 = T::fr(1.0 / (1.0 - self.cfg.beta1.powi(self.t as i32)));
        let inv_bc2 = T::fr(1.0 / (1.0 - self.cfg.beta2.powi(self.t as i32)));
        let lr_t = T::fr(lr);
        let eps = T::fr(self.cfg.eps);
        let wd = T::fr(self.cfg.weight_decay);
        for (id, g) in grads {
            let slot = self.slots[id.0].as_mut().ok_or_else(|| CoreError::Param {
                detail: format!("'{}' is not a learnable parameter", store.get(*id).name),
            })?;
            let theta = store.tensor_mut(*id).data_mut();
            if theta.len() != g.len() {
                return Err(CoreError::Param {
                    detail: format!("gradient length {} does not match parameter", g.len()),
                });
            }
            for i in 0..theta.len() {
                let gi = g[i];
                slot.m[i] = b1 * slot.m[i] + (one - b1) * gi;
                slot.v[i] = b2 * slot.v[i] + (one - b2) * gi * gi;
                let m_hat = slot.m[i] * inv_bc1;
                let v_hat = slot.v[i] * inv_bc2;
                let old = theta[i];
                theta[i] = old - lr_t * m_hat / (v_hat.sqrt() + eps) - lr_t * wd * old;
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(CoreError::InvalidArg {
                op: "schedule",
                detail: format!("warmup {warmup_steps} must be below total {total_steps}"),
            });
        }
        if base_lr <= 0.0 {
            return Err(CoreError::InvalidArg {
                op: "schedule",
                detail: "base_lr must be positive".into(),
            });
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }
}

pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step > s.total_steps {
        return 0.0;
    }
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let p = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.base_lr * 0.5 * (1.0 + (core::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(v), true).unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_is_pure_decay() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[(id, &[0.0])], 0.001).unwrap();
        let got = store.tensor(id).data()[0];
        assert!((got - 0.99999).abs() < 1e-15, "{got}");
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let (mut store, id) = scalar_store(0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[(id, &[1.0])], 0.001).unwrap();
        // m_hat = v_hat = 1 -> theta = -lr/(1+eps)
        let expect = -0.001 / (1.0 + 1e-8);
        let got = store.tensor(id).data()[0];
        assert!((got - expect).abs() < 1e-15, "{got}");
    }

    #[test]
    fn two_steps_match_independent_scalar_trace() {
        // Straight-line reimplementation of the update rule, kept separate
        // from the versioned code on purpose.
        let cfg = AdamWConfig::default();
        let (mut th, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        let lr = 0.01;
        let grads = [0.5, -1.25];
        for (k, &g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            th = th - lr * mh / (vh.sqrt() + cfg.eps) - lr * cfg.weight_decay * th;
        }

        let (mut store, id) = scalar_store(0.3);
        let mut opt = AdamW::new(cfg, &store);
        for &g in &grads {
            opt.step(&mut store, &[(id, &[g])], lr).unwrap();
        }
        let got = store.tensor(id).data()[0];
        assert!((got - th).abs() < 1e-12, "{got} vs {th}");
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn zero_betas_reduce_to_sign_scaled_sgd() {
        let cfg = AdamWConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true)
            .unwrap();
        let mut opt = AdamW::new(cfg, &store);
        let g = [0.4f64, -0.9, 2.0];
        opt.step(&mut store, &[(id, &g)], 0.1).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let expect = [1.0, -2.0, 0.5][i] - 0.1 * gi / (gi.abs() + cfg.eps);
            let got = store.tensor(id).data()[i];
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn nan_grad_aborts_naming_parameter() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store, &[(id, &[f64::NAN])], 0.001).unwrap_err();
        assert!(format!("{err}").contains("theta"));
        // aborted step leaves the parameter untouched and t unchanged
        assert_eq!(store.tensor(id).data()[0], 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn schedule_endpoints_and_continuity() {
        let s = Schedule::new(0.001, 40, 400).unwrap();
        assert_eq!(lr_at(0, &s), 0.0);
        assert!((lr_at(40, &s) - 0.001).abs() < 1e-18);
        assert!((lr_at(39, &s) - 0.001 * 39.0 / 40.0).abs() < 1e-18);
        let mid = 40 + (400 - 40) / 2;
        assert!((lr_at(mid, &s) - 0.0005).abs() < 1e-12);
        assert_eq!(lr_at(400, &s), 0.0);
        assert_eq!(lr_at(1000, &s), 0.0);
    }

    #[test]
    fn schedule_is_piecewise_monotone() {
        let s = Schedule::new(0.001, 50, 300).unwrap();
        for step in 1..=50u64 {
            assert!(lr_at(step, &s) >= lr_at(step - 1, &s));
        }
        for step in 51..=300u64 {
            assert!(lr_at(step, &s) <= lr_at(step - 1, &s));
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(Schedule::new(0.001, 10, 10).is_err());
        assert!(Schedule::new(0.0, 0, 10).is_err());
    }
}
