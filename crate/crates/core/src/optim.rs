//! AdamW with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter moments and the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr` (overrides `config.lr`, so a schedule
    /// can drive it).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(invalid("adamw: learning rate must be positive"));
        }
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(invalid("adamw: parameter/gradient count mismatch"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { index: i });
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - math::powf(c.beta1, self.t as f64);
        let bc2 = 1.0 - math::powf(c.beta2, self.t as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                md[j] = c.beta1 * md[j] + (1.0 - c.beta1) * gd[j];
                vd[j] = c.beta2 * vd[j] + (1.0 - c.beta2) * gd[j] * gd[j];
                let mh = md[j] / bc1;
                let vh = vd[j] / bc2;
                pd[j] -= lr * c.weight_decay * pd[j] + lr * mh / (math::sqrt(vh) + c.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 over the first `warmup_frac * total_epochs` epochs,
/// then cosine decay to 0.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64, warmup_frac: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(invalid("cosine_lr: total_epochs must be positive"));
    }
    if epoch >= total_epochs {
        return Err(invalid("cosine_lr: epoch out of range"));
    }
    let warm = warmup_frac * total_epochs as f64;
    let e = epoch as f64;
    if e < warm {
        return Ok(base_lr * e / warm);
    }
    let span = total_epochs as f64 - warm;
    let progress = (e - warm) / span;
    Ok(base_lr * 0.5 * (1.0 + math::cos(math::PI * progress)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor> {
        alloc::vec![Tensor::scalar(v)]
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() };
        let mut p = one(1.0);
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &one(1.0), 0.1).unwrap();
        // m_hat = v_hat = 1: 1 - 0.1*0.01 - 0.1/(1+1e-8)
        let expect = 1.0 - 0.001 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.899).abs() < 1e-8);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = one(2.5);
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &one(0.0), 0.1).unwrap();
        assert_eq!(p[0].data()[0], 2.5);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let cfg = AdamWConfig { weight_decay: 0.5, ..Default::default() };
        let mut p = one(4.0);
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &one(0.0), 0.1).unwrap();
        assert!((p[0].data()[0] - 0.95 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = alloc::vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let g = alloc::vec![Tensor::scalar(0.0), Tensor::scalar(f64::INFINITY)];
        assert_eq!(opt.step(&mut p, &g, 0.1), Err(Error::NonFiniteGradient { index: 1 }));
    }

    #[test]
    fn cosine_schedule_points() {
        assert!((cosine_lr(5, 100, 1e-3, 0.1).unwrap() - 5e-4).abs() < 1e-18);
        assert!((cosine_lr(10, 100, 1e-3, 0.1).unwrap() - 1e-3).abs() < 1e-18);
        let mid = 1e-3 * 0.5 * (1.0 + (core::f64::consts::PI * 45.0 / 90.0).cos());
        assert!((cosine_lr(55, 100, 1e-3, 0.1).unwrap() - mid).abs() < 1e-15);
        assert!((mid - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 100, 1e-3, 0.1).unwrap(), 0.0);
        assert!(cosine_lr(0, 0, 1e-3, 0.1).is_err());
        assert!(cosine_lr(100, 100, 1e-3, 0.1).is_err());
    }
}
