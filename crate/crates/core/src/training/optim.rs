//! Adaptive-moment optimizer over the trainable tensors of a store.

use crate::error::{contract, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(contract(format!("learning rate must be non-negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(contract("moment coefficients must lie in [0, 1) and eps must be positive"));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradient buffers. Tensors without a gradient
    /// buffer or with `requires_grad` off are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), Vec::new());
            self.second.resize(store.len(), Vec::new());
        }
        self.step += 1;
        if self.lr == 0.0 {
            return Ok(());
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let tensor = store.get_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            if m.is_empty() {
                *m = vec![0.0; grad.len()];
                *v = vec![0.0; grad.len()];
            }
            for (((w, &gr), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
