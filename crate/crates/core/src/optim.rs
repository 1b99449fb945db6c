//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            first: vec![None; num_params],
            second: vec![None; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = params.get_mut(id);
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let decay = 1.0 - c.lr * c.weight_decay;
            for (((w, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gr;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gr * gr;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w = *w * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}
