use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Adam { cfg, step: 0, v: m.clone(), m }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameters without a gradient keep their value but still age the
    /// bias correction, as in a dense implementation with zero gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f32>>]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = (self.cfg.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (self.cfg.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match &grads[i] {
                Some(g) => {
                    for k in 0..p.value.len() {
                        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                        p.value[k] -= lr * m[k] / (v[k].sqrt() + eps);
                    }
                }
                None => {
                    for k in 0..p.value.len() {
                        m[k] *= b1;
                        v[k] *= b2;
                        p.value[k] -= lr * m[k] / (v[k].sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Adam for a handful of f64 scalars.
#[derive(Clone, Debug)]
pub struct ScalarAdam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl ScalarAdam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        ScalarAdam { cfg, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, values: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for i in 0..values.len() {
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * grads[i];
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            values[i] -= self.cfg.learning_rate * mh / (vh.sqrt() + self.cfg.eps);
        }
    }
}
