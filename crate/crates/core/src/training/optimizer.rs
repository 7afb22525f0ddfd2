//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Skip decay on biases and the f/b embeddings.
    pub exempt_biases_and_embeddings: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            exempt_biases_and_embeddings: true,
        }
    }
}

/// Optimizer state: one pair of moment buffers per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &impl Parameters, config: OptimizerConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    /// One update at learning rate `lr`. Decay is applied to the weights
    /// directly, before the adaptive step.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - c.beta1.powi(t);
        let correct2 = 1.0 - c.beta2.powi(t);
        let grads = grads.params();
        for (k, (p, g)) in params.params_mut().into_iter().zip(grads).enumerate() {
            debug_assert_eq!(p.name, g.name);
            let decay = (p.decay || !c.exempt_biases_and_embeddings) && c.weight_decay != 0.0;
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.data.len() {
                if decay {
                    p.data[i] -= lr * c.weight_decay * p.data[i];
                }
                let gi = g.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}
