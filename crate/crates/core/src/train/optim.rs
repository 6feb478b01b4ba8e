use serde::{Deserialize, Serialize};

use crate::encoder::DualEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments, one buffer per parameter tensor in [`DualEncoder::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, model: &DualEncoder) -> Self {
        let (m, v) = match config {
            OptimizerConfig::Adam { .. } => {
                let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
                (zeros.clone(), zeros)
            }
            OptimizerConfig::Sgd => (Vec::new(), Vec::new()),
        };
        OptimizerState {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update of `grads` (shaped like `model`) with learning rate `lr`.
    pub fn update(&mut self, model: &mut DualEncoder, grads: &DualEncoder, lr: f64) {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd => {
                for (p, g) in model.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (x, dx) in p.iter_mut().zip(g) {
                        *x -= lr * dx;
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let params = model.tensors_mut();
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut DualEncoder, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for t in grads.tensors_mut() {
            for x in t.iter_mut() {
                *x *= c;
            }
        }
    }
    norm
}
