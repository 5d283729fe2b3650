use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
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

#[derive(Clone, Debug)]
struct Moments {
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam without weight decay; moment estimates and bias-correction step
/// counts are kept per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, state: BTreeMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { step: 0, m: vec![0.0; g.numel()], v: vec![0.0; g.numel()] });
            st.step += 1;
            let c1 = 1.0 - beta1.powi(st.step);
            let c2 = 1.0 - beta2.powi(st.step);
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
