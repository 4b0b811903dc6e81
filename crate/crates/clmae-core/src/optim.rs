//! Decoupled-weight-decay Adam and the warmup-cosine learning-rate curve.

use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// `t` counts optimizer steps from 1; it drives the bias correction.
    /// Decay multiplies the weights directly and never enters the moments.
    pub fn step(&self, params: &mut [&mut Param], lr: f64, t: usize) {
        assert!(t >= 1, "bias correction needs a 1-based step count");
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let shrink = 1.0 - lr * self.weight_decay;
        for p in params.iter_mut() {
            debug_assert_eq!(p.grad.len(), p.value.data.len(), "{}: grad size drifted", p.name);
            for i in 0..p.value.data.len() {
                let g = p.grad[i];
                p.value.data[i] *= shrink;
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                p.grad[i] = 0.0;
            }
        }
    }
}

/// Learning rate at 1-based `step`: linear ramp over the first `warmup`
/// steps, cosine from the peak down to zero at `total`.
pub fn lr_at(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    assert!(step >= 1, "learning-rate curve is indexed from 1");
    assert!(warmup < total, "warmup {warmup} must leave room before {total}");
    if step >= total {
        return 0.0;
    }
    if warmup > 0 && step <= warmup {
        return base * (step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
