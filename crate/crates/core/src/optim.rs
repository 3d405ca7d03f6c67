//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = store.grad(id).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = store.value_mut(id).data_mut();
            for k in 0..grad.len() {
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Moment buffers as checkpoint entries, named after their parameters.
    pub fn state_entries<'a>(&'a self, store: &'a ParamStore) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (id, name) in store.sorted() {
            out.push((format!("adam.m/{name}"), &self.m[id.index()]));
            out.push((format!("adam.v/{name}"), &self.v[id.index()]));
        }
        out
    }

    /// Restores moment buffers and the step counter.
    pub fn restore(
        &mut self,
        store: &ParamStore,
        step: u64,
        entries: &[(String, Tensor)],
    ) -> Result<()> {
        for (id, name) in store.sorted() {
            for (prefix, slot) in [("adam.m/", &mut self.m), ("adam.v/", &mut self.v)] {
                let key = format!("{prefix}{name}");
                let t = entries
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
                if t.shape() != store.value(id).shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for {key}")));
                }
                slot[id.index()] = t.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}
