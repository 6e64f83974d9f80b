//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning rate used for every meta-training run unless overridden.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

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
            lr: DEFAULT_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(Tensor::zeros_like).collect();
        Self {
            config,
            step: 0,
            first_moments: zeros.clone(),
            second_moments: zeros,
        }
    }

    /// Applies one bias-corrected update to every parameter in place.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.first_moments.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moments.len()
            )));
        }
        for ((p, g), m) in params.tensors().iter().zip(grads).zip(&self.first_moments) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (i, param) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first_moments[i].data_mut();
            let v = self.second_moments[i].data_mut();
            for (j, w) in param.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(values));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = store(&[0.5, -1.5, 2.0]);
        let before = params.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::zeros(1, 3)]).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // t = 1: m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + eps).
        let mut params = store(&[1.0, 1.0, 1.0]);
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(cfg, &params);
        let g = [0.3, -2.0, 1e-3];
        adam.step(&mut params, &[Tensor::row(&g)]).unwrap();
        for (w, gi) in params.tensors()[0].data().iter().zip(g) {
            let expected = 1.0 - cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((w - expected).abs() < 1e-15);
            assert!(((1.0 - w) - cfg.lr * gi.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn two_steps_track_ema() {
        let mut params = store(&[0.0]);
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(cfg, &params);
        let g = 0.7;
        for _ in 0..2 {
            adam.step(&mut params, &[Tensor::row(&[g])]).unwrap();
        }
        assert_eq!(adam.step, 2);
        // m₂ = (1 − β₁²)·g, v₂ = (1 − β₂²)·g² for a constant gradient.
        let m = (1.0 - cfg.beta1 * cfg.beta1) * g;
        let v = (1.0 - cfg.beta2 * cfg.beta2) * g * g;
        assert!((adam.first_moments[0].item() - m).abs() < 1e-15);
        assert!((adam.second_moments[0].item() - v).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = store(&[0.0, 0.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let err = adam.step(&mut params, &[Tensor::zeros(1, 3)]);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        assert_eq!(adam.step, 0);
    }
}
