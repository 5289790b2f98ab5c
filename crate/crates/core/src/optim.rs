//! AdamW with decoupled weight decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::math;
use crate::model::{Gradients, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|t| Matrix::zeros(t.value.rows, t.value.cols)).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    /// One update. Returns the gradient norm before clipping.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            bail!(Argument, "optimizer, gradients and parameters disagree in layout");
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            bail!(Numerical, "gradient norm is {norm} at optimizer step {}", self.step + 1);
        }
        let clip = match self.config.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (i, tensor) in params.iter_mut().enumerate() {
            let g = grads.get(i);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gi), mi), vi) in tensor.value.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= c.lr * (mhat / (math::sqrt(vhat) + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::default();
        p.push("w", Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let mut g = Gradients::zeros_like(&p);
        g.get_mut(0).data.copy_from_slice(&[0.3, -0.1, 0.0]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, max_grad_norm: None, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.update(&mut p, &g).unwrap();
        let w = &p.get(0).data;
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - -1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut p = ParamStore::default();
        p.push("w", Matrix::from_vec(1, 1, vec![2.0]));
        let g = Gradients::zeros_like(&p);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.update(&mut p, &g).unwrap();
        assert!((p.get(0).data[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_a_numerical_error() {
        let mut p = ParamStore::default();
        p.push("w", Matrix::zeros(1, 1));
        let mut g = Gradients::zeros_like(&p);
        g.get_mut(0).data[0] = f64::NAN;
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(matches!(opt.update(&mut p, &g), Err(crate::Error::Numerical(_))));
    }
}
