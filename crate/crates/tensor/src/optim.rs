use serde::{Deserialize, Serialize};

use crate::{Params, Result, TensorError};

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros = |_| Vec::new();
        let mut first: Vec<Vec<f64>> = (0..params.len()).map(zeros).collect();
        let mut second = first.clone();
        for (i, (_, t)) in params.iter().enumerate() {
            first[i] = vec![0.0; t.numel()];
            second[i] = vec![0.0; t.numel()];
        }
        Self {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update from the gradients stored on `params`, then clears
    /// them. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(TensorError::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for i in 0..params.len() {
            if params.get(i).grad().is_none() {
                return Err(TensorError::MissingGradient(params.name(i).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().enumerate() {
            let grad = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
