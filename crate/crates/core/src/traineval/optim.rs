//! Adam with L2 weight decay and a step learning-rate schedule.

use crate::error::{Error, Result};
use crate::layers::Named;
use crate::tensor::Array;

/// Adam where weight decay is added to the gradient before the moment updates.
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Array, Array)>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Adam {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params` at learning rate `lr`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &[Named], lr: f64) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, p)| {
                    let z = Array::zeros(p.value().raw_dim());
                    (z.clone(), z)
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for ((name, p), (m, v)) in params.iter().zip(&mut self.moments) {
            let mut value = p.value_mut();
            if value.shape() != m.shape() {
                return Err(Error::shape(format!("parameter {name} changed shape")));
            }
            let grad = p.grad().unwrap_or_else(|| Array::zeros(value.raw_dim()));
            ndarray::Zip::from(&mut *value).and(m).and(v).and(&grad).for_each(|w, m, v, &g| {
                let g = g + self.weight_decay * *w;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

/// Learning rate multiplied by `gamma` every `step_size` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub gamma: f64,
    pub step_size: usize,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_size.max(1)) as i32)
    }
}
