use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup: 400,
            clip_norm: 10.0,
        }
    }
}

/// Linear warmup to `lr`, then decay with the inverse square root of the
/// step (1-based).
pub fn inverse_sqrt_lr(cfg: &AdamConfig, step: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup.max(1) as f64;
    cfg.lr * (s / w).min((w / s).sqrt())
}

/// Global L2 norm of a flat gradient.
pub fn grad_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `g` so its global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let n = grad_norm(g);
    if max_norm > 0.0 && n > max_norm {
        let c = max_norm / n;
        g.iter_mut().for_each(|x| *x *= c);
    }
    n
}

pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, numel: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step: 0,
        }
    }

    /// One update of `params` (in order) from the flat gradient `g`;
    /// returns the learning rate used.
    pub fn update(&mut self, params: &mut [Tensor], g: &[f64]) -> f64 {
        self.step += 1;
        let lr = inverse_sqrt_lr(&self.cfg, self.step);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut k = 0;
        for p in params {
            for x in p.data.iter_mut() {
                self.m[k] = b1 * self.m[k] + (1.0 - b1) * g[k];
                self.v[k] = b2 * self.v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = self.m[k] / c1;
                let vh = self.v[k] / c2;
                *x -= lr * mh / (vh.sqrt() + self.cfg.eps);
                k += 1;
            }
        }
        lr
    }
}
