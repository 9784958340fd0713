//! Adam with bias correction, operating on the flat parameter list in visit
//! order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CmfnetParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates per parameter tensor plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &CmfnetParams<f32>) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(vec![0.0f32; t.numel()]));
        AdamState { cfg: AdamConfig::default(), v: m.clone(), m, t: 0 }
    }

    /// One bias-corrected update. `grads` must align with the visit order;
    /// parameter tensors are replaced by fresh leaves (clearing their grads).
    pub fn step(&mut self, params: &mut CmfnetParams<f32>, grads: &[Vec<f32>], lr: f32) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} gradient tensors for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut idx = 0usize;
        let mut status = Ok(());
        params.visit_mut(&mut |name, tensor| {
            if status.is_err() {
                return;
            }
            let g = &grads[idx];
            if g.len() != tensor.numel() {
                status = Err(Error::shape("adam", format!("gradient size mismatch on {name}")));
                return;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut data = tensor.data().to_vec();
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            *tensor = Tensor::param(tensor.shape(), data).unwrap();
            idx += 1;
        });
        status
    }
}

/// Gradients of every parameter in visit order; a parameter without a
/// populated gradient is an error.
pub fn collect_grads(params: &CmfnetParams<f32>) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    let mut missing: Option<String> = None;
    params.visit(&mut |name, t| {
        match t.grad() {
            Some(g) => out.push(g),
            None => {
                if missing.is_none() {
                    missing = Some(name.to_string());
                }
            }
        }
    });
    match missing {
        Some(name) => Err(Error::InvalidArgument(format!("no gradient for parameter {name}"))),
        None => Ok(out),
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}
