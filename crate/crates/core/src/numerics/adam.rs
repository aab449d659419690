use std::collections::HashMap;

use super::param::{Gradients, ParamId, Parameterized};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are tracked per parameter id, so one
/// optimizer can serve several models.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, state: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter of `model`. Missing gradients count as zero.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, grads: &Gradients) -> Result<()> {
        for p in model.params() {
            if let Some(g) = grads.get(p.id()) {
                if g.len() != p.len() {
                    return Err(Error::Shape(format!("gradient has {} values, parameter {}", g.len(), p.len())));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in model.params_mut() {
            let n = p.len();
            let (m, v) = self.state.entry(p.id()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let zeros;
            let g = match grads.get(p.id()) {
                Some(g) => g.data(),
                None => {
                    zeros = Tensor::zeros(&[n]);
                    zeros.data()
                }
            };
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
