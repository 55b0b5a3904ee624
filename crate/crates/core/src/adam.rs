//! Adam with bias correction over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, config: AdamConfig) -> Self {
        Self {
            lr,
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update in place. On a non-finite gradient nothing is modified and
    /// the offending index is returned.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), usize> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under the optimizer");
        assert_eq!(grads.len(), self.m.len(), "gradient count does not match parameters");
        if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
            return Err(idx);
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(3, 0.01, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut adam = Adam::new(1, 0.01, AdamConfig::default());
        let mut p = vec![0.0];
        adam.step(&mut p, &[1.0]).unwrap();
        // m_hat = 1, v_hat = 1 exactly after correction
        assert!((p[0] - (-0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut adam = Adam::new(2, 0.01, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        for _ in 0..100 {
            adam.step(&mut p, &[0.5, -3.0]).unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut adam = Adam::new(2, 0.01, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        assert_eq!(adam.step(&mut p, &[0.0, f64::NAN]), Err(1));
        assert_eq!(adam.step_count(), 0);
    }
}
