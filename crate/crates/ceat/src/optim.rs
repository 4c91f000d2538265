//! AdamW with decoupled weight decay and a cosine learning-rate
//! schedule. Moment buffers are kept in f64 regardless of the model's
//! precision and are keyed by parameter name, so the set of trained
//! parameters may change between tasks.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adamw", format!("{self:?}")));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("adamw", format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, state: HashMap::new() })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Drops all moment buffers, as at a task boundary where the trained
    /// parameter set changes.
    pub fn reset(&mut self) {
        self.state.clear();
    }

    /// Applies one update to `param` given its gradient, at `lr` (the
    /// schedule-adjusted rate). Per-parameter step counts live with the
    /// moments, so parameters added later bias-correct from their own
    /// first step.
    pub fn step<T: Element>(
        &mut self,
        name: &str,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        lr: f64,
    ) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                "adamw",
                format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
            ));
        }
        let n = param.numel();
        let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        if entry.m.len() != n {
            return Err(Error::shape(
                "adamw",
                format!("{name}: moments hold {} values, param has {n}", entry.m.len()),
            ));
        }
        entry.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(entry.step as i32);
        let bc2 = 1.0 - b2.powi(entry.step as i32);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad.data()[i].to_f64();
            entry.m[i] = b1 * entry.m[i] + (1.0 - b1) * g;
            entry.v[i] = b2 * entry.v[i] + (1.0 - b2) * g * g;
            let mhat = entry.m[i] / bc1;
            let vhat = entry.v[i] / bc2;
            let p = data[i].to_f64();
            let next = p - lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p);
            if !next.is_finite() {
                return Err(Error::NonFinite { op: "adamw".into() });
            }
            data[i] = T::from_f64(next);
        }
        Ok(())
    }
}

/// Cosine decay from `base` over `total` epochs; epoch 0 returns `base`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> Result<f64> {
    if total == 0 || epoch >= total {
        return Err(Error::Schedule(format!("epoch {epoch} of {total}")));
    }
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_hand_computation() {
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = Tensor::from_vec(vec![1, 1], vec![1.0f64]).unwrap();
        let g = Tensor::from_vec(vec![1, 1], vec![0.5f64]).unwrap();
        opt.step("p", &mut p, &g, 0.1).unwrap();
        // m=0.05, v=0.00025; bias-corrected to 0.5 and 0.25;
        // p' = 1 - 0.1*(0.5/(0.5+1e-8) + 0.01)
        let want = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + 1e-8) + 0.01);
        assert!((p.item() - want).abs() < 1e-15);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() }).unwrap();
        let target = [0.3f64, -0.7, 1.2];
        let mut p = Tensor::from_vec(vec![1, 3], vec![0.0f64; 3]).unwrap();
        for _ in 0..2000 {
            let g: Vec<f64> = p.data().iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            let g = Tensor::from_vec(vec![1, 3], g).unwrap();
            opt.step("p", &mut p, &g, 0.05).unwrap();
        }
        for (x, t) in p.data().iter().zip(&target) {
            assert!((x - t).abs() < 1e-4, "{x} vs {t}");
        }
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() }).unwrap();
        let mut p = Tensor::from_vec(vec![1, 1], vec![2.0f64]).unwrap();
        let g = Tensor::zeros(vec![1, 1]);
        opt.step("p", &mut p, &g, 0.1).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn moments_are_per_parameter_name() {
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        let g = Tensor::from_vec(vec![1, 1], vec![1.0f64]).unwrap();
        let mut a = Tensor::from_vec(vec![1, 1], vec![0.0f64]).unwrap();
        let mut b = Tensor::from_vec(vec![1, 1], vec![0.0f64]).unwrap();
        opt.step("a", &mut a, &g, 1e-3).unwrap();
        opt.step("a", &mut a, &g, 1e-3).unwrap();
        opt.step("b", &mut b, &g, 1e-3).unwrap();
        // first step magnitude is lr regardless of history, so b's single
        // step matches a's first
        assert!((b.item() - -1e-3).abs() < 1e-9);
        assert!(a.item() < b.item());
        opt.reset();
        let mut c = Tensor::from_vec(vec![1, 1], vec![0.0f64]).unwrap();
        opt.step("a", &mut c, &g, 1e-3).unwrap();
        assert!((c.item() - b.item()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        let mut p = Tensor::<f64>::zeros(vec![1, 2]);
        let g = Tensor::<f64>::zeros(vec![2, 1]);
        assert!(opt.step("p", &mut p, &g, 1e-3).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10).unwrap(), 1.0);
        let mid = cosine_lr(1.0, 5, 10).unwrap();
        assert!((mid - 0.5).abs() < 1e-15);
        let last = cosine_lr(1.0, 9, 10).unwrap();
        assert!(last > 0.0 && last < 0.05);
        assert!(cosine_lr(1.0, 10, 10).is_err());
    }
}
