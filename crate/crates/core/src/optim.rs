//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::tensor::ParamStore;

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter with a gradient and
    /// clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            if !p.tensor.requires_grad {
                continue;
            }
            let Some(grad) = p.tensor.grad.take() else {
                continue;
            };
            for ((w, g), vel) in p.tensor.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                *vel = mu * *vel + (*g + wd * *w);
                *w -= lr * *vel;
            }
        }
    }
}

/// Adam with L2 weight decay added to the gradient (the coupled variant).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update. With `lr == 0` parameters are left bitwise untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.tensor.requires_grad {
                continue;
            }
            let Some(grad) = p.tensor.grad.take() else {
                continue;
            };
            if lr == 0.0 {
                continue;
            }
            for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = *g as f64 + self.weight_decay * *w as f64;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// Per-epoch learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr/2 * (1 + cos(pi * e / epochs))`.
    Cosine { lr: f64, epochs: usize },
    /// Linear ramp to `lr` over `warmup` epochs, then cosine over the rest.
    WarmupCosine { lr: f64, warmup: usize, epochs: usize },
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        use std::f64::consts::PI;
        let cosine = |lr: f64, e: usize, n: usize| {
            if n == 0 {
                lr
            } else {
                0.5 * lr * (1.0 + (PI * e.min(n) as f64 / n as f64).cos())
            }
        };
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { lr, epochs } => cosine(lr, epoch, epochs),
            LrSchedule::WarmupCosine { lr, warmup, epochs } => {
                if epoch < warmup {
                    lr * (epoch + 1) as f64 / warmup as f64
                } else {
                    cosine(lr, epoch - warmup, epochs.saturating_sub(warmup))
                }
            }
        }
    }
}
