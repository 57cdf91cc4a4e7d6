//! SGD with momentum and weight decay, and the polynomial learning-rate schedule.

use crate::params::ParamSet;
use crate::tensor::Tensor;

/// `base_lr · (1 − step/total)^power`, clamped to the schedule's range.
pub fn poly_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    base_lr * (1.0 - frac).powf(power)
}

/// Heavy-ball SGD with coupled L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Tensor>) {
        self.velocity = v;
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        for ((w, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gi + self.weight_decay * *wi;
                *vi = self.momentum * *vi + d;
                *wi -= lr * *vi;
            }
        }
    }
}
