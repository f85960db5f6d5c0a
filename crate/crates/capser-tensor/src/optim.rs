//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use crate::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment state lives in name-keyed maps, so the same
/// optimizer instance can serve a parameter collection that is visited in
/// any order, and parameters absent from a step (e.g. a disabled head)
/// simply keep their state.
pub struct Adam<S: Scalar = f64> {
    cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter that has a gradient in
    /// `grads`; parameters without one are left untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<S>)],
        grads: &BTreeMap<String, Vec<S>>,
    ) -> Result<()> {
        self.t += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        let bc1 = S::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        for (name, param) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != param.data.len() {
                return Err(TensorError::Shape(format!(
                    "gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    param.data.len()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
