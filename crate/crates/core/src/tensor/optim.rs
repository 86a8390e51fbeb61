use std::collections::HashMap;
use std::f64::consts::PI;

use super::param::Parameter;
use super::tensor::Tensor;

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
///
/// Returns the factor applied (1.0 when no clipping was needed).
pub fn clip_global_norm(params: &mut [&mut Parameter], max_norm: f32) -> f32 {
    let norm = global_grad_norm(params);
    if norm > max_norm as f64 && norm > 0.0 {
        let factor = (max_norm as f64 / norm) as f32;
        for p in params.iter_mut() {
            p.grad.scale_in_place(factor);
        }
        factor
    } else {
        1.0
    }
}

pub fn global_grad_norm(params: &[&mut Parameter]) -> f64 {
    params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        AdamW {
            weight_decay,
            ..Default::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its `grad`.
    pub fn step(&mut self, params: &mut [&mut Parameter], lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let g = p.grad.data();
            let w = p.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * wd * w[i];
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Cosine decay from `lr_start` to `lr_end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_start: f32,
    pub lr_end: f32,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr_start: f32, lr_end: f32, total_steps: usize) -> Self {
        CosineSchedule {
            lr_start,
            lr_end,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f32 {
        if self.total_steps == 0 {
            return self.lr_end;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        let cos = 0.5 * (1.0 + (PI * frac).cos());
        (self.lr_end as f64 + (self.lr_start - self.lr_end) as f64 * cos) as f32
    }
}
