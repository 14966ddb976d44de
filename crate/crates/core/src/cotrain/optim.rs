use crate::error::{Error, Result};
use crate::model::MultiHeadModel;

/// `base_lr · cos(7π·t / (16·T))`.
pub fn cosine_lr(base_lr: f64, t: u64, total: u64) -> Result<f64> {
    if t > total {
        return Err(Error::contract(format!("iteration {t} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (7.0 * std::f64::consts::PI * t as f64 / (16.0 * total as f64)).cos())
}

/// One Nesterov-momentum SGD update with L2 weight decay folded into the gradient:
///
/// ```text
/// g ← grad + wd·p;  v ← μ·v + g;  p ← p − lr·(g + μ·v)
/// ```
pub fn sgd_nesterov_step(
    params: &mut [f64],
    grads: &[f64],
    momentum_buffer: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert!(params.len() == grads.len() && grads.len() == momentum_buffer.len());
    for ((p, g), v) in params.iter_mut().zip(grads).zip(momentum_buffer.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
}

/// Momentum buffers for every trainable tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdNesterov {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Vec<f64>>,
}

impl SgdNesterov {
    pub fn new(model: &mut MultiHeadModel, momentum: f64, weight_decay: f64) -> Self {
        let mut buffers = Vec::new();
        model.for_each_param_mut(|p| buffers.push(vec![0.0; p.len()]));
        Self {
            momentum,
            weight_decay,
            buffers,
        }
    }

    pub fn step(&mut self, model: &mut MultiHeadModel, lr: f64) {
        let mut bufs = self.buffers.iter_mut();
        let (momentum, wd) = (self.momentum, self.weight_decay);
        model.for_each_param_mut(|p| {
            let buf = bufs.next().expect("optimizer built for this model");
            sgd_nesterov_step(&mut p.value, &p.grad, buf, lr, momentum, wd);
        });
    }
}
