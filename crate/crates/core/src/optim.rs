//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moment buffers, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Applies one update from the gradients held in `store`. Parameters
    /// without a gradient are treated as having a zero gradient. Decay is
    /// `p *= 1 - lr * wd` and only touches parameters flagged for it.
    pub fn update(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidConfig(format!(
                "optimizer holds {} buffers for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = store.decays(id);
            let p = store.get_mut(id);
            let grad = p.grad.take();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            if m.len() != p.numel() {
                return Err(Error::InvalidConfig("optimizer buffer shape changed".into()));
            }
            let shrink = if decay { 1.0 - c.lr * c.weight_decay } else { 1.0 };
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] * shrink - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            p.grad = grad;
        }
        Ok(())
    }
}
