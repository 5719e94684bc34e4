//! Adam with bias-corrected moments.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Adam { config, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let all = 0..params.len();
        self.step_ranges(params, grads, core::slice::from_ref(&all));
    }

    /// Updates only the coordinates inside `ranges`; the rest of the
    /// parameters and their moments are untouched.
    pub fn step_ranges(&mut self, params: &mut [f64], grads: &[f64], ranges: &[Range<usize>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), params.len(), "gradient count differs from parameters");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(beta1, f64::from(t));
        let bc2 = 1.0 - libm::pow(beta2, f64::from(t));
        for range in ranges {
            for i in range.clone() {
                let g = grads[i];
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                params[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
    }
}
