use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// Adam with PyTorch's bias-corrected update and no built-in weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(like: &[Matrix]) -> Self {
        let zeros = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.iter().map(zeros).collect(),
            v: like.iter().map(zeros).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let denom = (v.data[i] / bc2).sqrt() + self.eps;
                p.data[i] -= lr * (m.data[i] / bc1) / denom;
            }
        }
    }
}

/// Halves (by `factor`) the learning rate after `patience` epochs without
/// relative improvement of at least `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Plateau {
            factor,
            patience,
            threshold: 1e-4,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's monitored value and returns the new learning rate.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if self
            .best
            .is_none_or(|b| metric < b * (1.0 - self.threshold))
        {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return lr * self.factor;
        }
        lr
    }
}

/// Rounds every entry to the nearest `f32`.
pub fn round_to_f32(ms: &mut [Matrix]) {
    for m in ms {
        for v in &mut m.data {
            *v = *v as f32 as f64;
        }
    }
}
