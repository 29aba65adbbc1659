//! Adam with bias correction.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{ModelParams, ParamGrads};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Adam {
            config,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter that has a gradient; the rest are untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        for (id, g) in grads.iter() {
            let i = id.index();
            let (rows, cols) = g.shape();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let p = params.value_mut(id);
            for (((pj, mj), vj), gj) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= c.step_size * mhat / (libm::sqrt(vhat) + c.eps);
            }
        }
    }
}
