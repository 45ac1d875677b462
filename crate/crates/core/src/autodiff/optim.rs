//! Adam optimizer over named parameter tensors.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fmath;

use super::tape::AdError;
use super::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second-moment state per parameter path.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one Adam update to every (parameter, gradient) pair. The pairs
    /// must arrive in a stable order with stable path names; state slots are
    /// created on first use.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut [(String, &mut Tensor)],
        grads: &[Tensor],
    ) -> Result<(), AdError> {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - pow(cfg.beta1, t);
        let bc2 = 1.0 - pow(cfg.beta2, t);
        for ((path, param), grad) in params.iter_mut().zip(grads) {
            if param.shape() != grad.shape() {
                return Err(AdError::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape(),
                    rhs: grad.shape(),
                });
            }
            let (m, v) = self
                .slots
                .entry(path.clone())
                .or_insert_with(|| (alloc::vec![0.0; param.len()], alloc::vec![0.0; param.len()]));
            let data = param.data_mut();
            for ((p, g), (mi, vi)) in data
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= cfg.learning_rate * m_hat / (fmath::sqrt(v_hat) + cfg.epsilon);
            }
        }
        Ok(())
    }
}

fn pow(base: f64, exp: f64) -> f64 {
    // Integer exponents only (Adam step counts); exponentiation by squaring
    // keeps this core-only.
    let mut e = exp as u64;
    let mut b = base;
    let mut acc = 1.0;
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    acc
}

/// Scales gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g.iter() {
            sq += v * v;
        }
    }
    let norm = fmath::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(1, 3, alloc::vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut state = AdamState::new();
        let grads = [Tensor::zeros(1, 3)];
        state
            .step(
                &AdamConfig::default(),
                &mut [("p".to_string(), &mut p)],
                &grads,
            )
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // One Adam step from zero state: m = (1-b1) g, v = (1-b2) g^2,
        // m_hat = g, v_hat = g^2, delta = -lr g / (|g| + eps).
        let cfg = AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let g = 0.37;
        let mut p = Tensor::scalar(2.0);
        let mut state = AdamState::new();
        state
            .step(
                &cfg,
                &mut [("p".to_string(), &mut p)],
                &[Tensor::scalar(g)],
            )
            .unwrap();
        let expect = 2.0 - 0.01 * g / (g.abs() + 1e-8);
        assert!((p.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn update_depends_on_moment_state() {
        // A zero-gradient step after a non-zero one still moves the
        // parameter (momentum), so the trajectory cannot be reproduced by a
        // single rescaled step.
        let cfg = AdamConfig::default();
        let double = AdamConfig {
            learning_rate: 2.0 * cfg.learning_rate,
            ..cfg
        };

        let mut p1 = Tensor::scalar(1.0);
        let mut s1 = AdamState::new();
        s1.step(&cfg, &mut [("p".to_string(), &mut p1)], &[Tensor::scalar(0.5)])
            .unwrap();
        let after_first = p1.item();
        s1.step(&cfg, &mut [("p".to_string(), &mut p1)], &[Tensor::scalar(0.0)])
            .unwrap();
        assert!((p1.item() - after_first).abs() > 1e-9);

        let mut p2 = Tensor::scalar(1.0);
        let mut s2 = AdamState::new();
        s2.step(&double, &mut [("p".to_string(), &mut p2)], &[Tensor::scalar(0.5)])
            .unwrap();
        assert!((p1.item() - p2.item()).abs() > 1e-9);
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let mut grads = [Tensor::from_vec(1, 2, alloc::vec![3.0, 4.0])];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = grads[0].iter().map(|v| v * v).sum::<f64>();
        assert!((clipped.sqrt() - 1.0).abs() < 1e-12);
    }
}
