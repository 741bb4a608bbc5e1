//! Stochastic gradient descent with classical (heavy-ball) momentum.
//!
//! Update rule: `v <- mu * v + g`, `p <- p - lr * v`, velocities starting at
//! zero. One velocity buffer per parameter tensor, matched by position.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MomentumState {
    velocities: Vec<Vec<f64>>,
    pub lr: f64,
    pub mu: f64,
}

impl MomentumState {
    /// `sizes` holds the element count of each parameter tensor in order.
    pub fn new(sizes: &[usize], lr: f64, mu: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&mu), "momentum must lie in [0, 1)");
        Self {
            velocities: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            lr,
            mu,
        }
    }

    pub fn for_params(params: &[&Tensor], lr: f64, mu: f64) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        Self::new(&sizes, lr, mu)
    }

    /// Zero all velocity buffers (used at the loss-phase boundary).
    pub fn reset(&mut self) {
        for v in &mut self.velocities {
            v.fill(0.0);
        }
    }

    /// Apply one update step. `grads[i]` must shape-match parameter `i`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.velocities.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.velocities.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocities) {
            if param.numel() != grad.len() || vel.len() != grad.len() {
                return Err(Error::ShapeMismatch {
                    expected: vec![param.numel()],
                    got: vec![grad.len()],
                });
            }
            let lr = self.lr;
            let mu = self.mu;
            for ((p, &g), v) in param.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}
