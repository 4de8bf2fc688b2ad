use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamStore};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || -> Vec<Mat> {
            store
                .values()
                .iter()
                .map(|p| Mat::zeros(p.rows(), p.cols()))
                .collect()
        };
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Applies one update; `skip` lists parameters updated elsewhere (e.g. an
    /// EMA codebook). Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Grads, skip: &[usize]) -> f64 {
        let norm = grads.global_norm();
        if let Some(max) = self.config.clip_norm {
            if norm > max {
                grads.scale(max / norm);
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in 0..store.len() {
            if skip.contains(&id) {
                continue;
            }
            let g = grads.tensors[id].data();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        norm
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Mat::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                clip_norm: None,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..500 {
            let mut grads = {
                let mut g = Graph::new(&store);
                let x = g.param(0);
                let l = g.sum_sq(x);
                g.backward(l)
            };
            opt.step(&mut store, &mut grads, &[]);
        }
        assert!(store.get(0).sum_sq() < 1e-3);
    }

    #[test]
    fn clipping_caps_the_update_norm() {
        let mut store = ParamStore::new();
        store.add("x", Mat::zeros(1, 1));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let mut grads = Grads {
            tensors: vec![Mat::filled(1, 1, 100.0)],
        };
        let norm = opt.step(&mut store, &mut grads, &[]);
        assert_eq!(norm, 100.0);
        assert!((grads.tensors[0][(0, 0)] - 1.0).abs() < 1e-12);
    }
}
