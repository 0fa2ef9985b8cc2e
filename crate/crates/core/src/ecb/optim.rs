//! SGD with momentum and weight decay, and the inverse-decay LR schedule.

use crate::autodiff::Parameter;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// `v = m v + g + wd p; p -= lr v`, then zero the gradients. A
    /// non-finite gradient aborts before any parameter is touched.
    pub fn step(&self, params: &mut [&mut Parameter], lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {}", p.name())));
        }
        for p in params.iter_mut() {
            let Parameter { value, grad, momentum, .. } = &mut **p;
            for ((w, g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(momentum.data_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= lr * *v;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// `lr0 * (1 + gamma * iter)^(-power)`.
pub fn lr_schedule(lr0: f64, gamma: f64, power: f64, iter: usize) -> f64 {
    lr0 * (1.0 + gamma * iter as f64).powf(-power)
}
