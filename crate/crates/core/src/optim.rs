//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero-initialized moments shaped after `store`; defaults
    /// `beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`.
    pub fn new(store: &ParamStore, learning_rate: f64) -> Result<Self> {
        if learning_rate <= 0.0 || !learning_rate.is_finite() {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`. Parameters
    /// without an allocated gradient count as zero-gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first_moment.len() != store.len() {
            return Err(Error::dim(
                "adam_step",
                &[self.first_moment.len()],
                &[store.len()],
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let tensor = store.get_mut(id);
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let m = &mut self.first_moment[pi];
            let v = &mut self.second_moment[pi];
            if m.len() != grad.len() {
                return Err(Error::dim("adam_step", &[m.len()], &[grad.len()]));
            }
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
