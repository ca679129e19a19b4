use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::tensor::Tensor;

/// Hyperparameters for the decoupled-weight-decay Adam update.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moment state plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamWState {
    pub fn new(params: &[&Tensor], cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One decoupled update: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    /// Every parameter must carry a gradient; gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(CoreError::DimensionMismatch {
                left: vec![params.len()],
                right: vec![self.m.len()],
            });
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(CoreError::UninitializedGradient(format!("parameter {i}")));
            }
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad().unwrap().to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            for j in 0..g.len() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let old = data[j];
                data[j] = old
                    - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps)
                    - self.cfg.lr * self.cfg.weight_decay * old;
            }
            p.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_leaves_parameter_unchanged() {
        let mut p = Tensor::param(vec![2], vec![1.5, -0.5]).unwrap();
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new(&[&p], cfg);
        state.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.5, -0.5]);
        assert!(p.grad().is_none());
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // p = 1, g = 1, lr = 0.1, no decay: bias-corrected m_hat = v_hat = 1,
        // so the step is lr / (1 + eps) ~ 0.1 and p lands near 0.9.
        let mut p = Tensor::param(vec![1], vec![1.0]).unwrap();
        p.accumulate_grad(&[1.0]).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new(&[&p], cfg);
        state.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_only_shrinks_parameter_by_lr_wd_p() {
        let mut p = Tensor::param(vec![1], vec![2.0]).unwrap();
        p.accumulate_grad(&[0.0]).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new(&[&p], cfg);
        state.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
        // a second decay-only step shrinks from the updated value
        p.accumulate_grad(&[0.0]).unwrap();
        let before = p.data()[0];
        state.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - (before - 0.1 * 0.01 * before)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::param(vec![1], vec![1.0]).unwrap();
        let mut state = AdamWState::new(&[&p], AdamWConfig::default());
        assert!(matches!(
            state.step(&mut [&mut p]),
            Err(CoreError::UninitializedGradient(_))
        ));
    }
}
