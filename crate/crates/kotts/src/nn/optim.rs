//! Adam with coupled weight decay and global-norm gradient clipping.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 1e-6,
            clip_norm: 1.0,
        }
    }
}

/// First/second moment estimates, one pair per parameter, plus the step
/// counter used for bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, _, v)| ArrayD::zeros(v.raw_dim())).collect();
        let v = params.iter().map(|(_, _, p)| ArrayD::zeros(p.raw_dim())).collect();
        Adam { config, step: 0, m, v }
    }

    /// Scales gradients in place so their global L2 norm is at most
    /// `clip_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&self, grads: &mut Gradients) -> f64 {
        let norm = grads.squared_norm().sqrt();
        if norm > self.config.clip_norm && norm > 0.0 {
            grads.scale(self.config.clip_norm / norm);
        }
        norm
    }

    /// One update. Weight decay is added to the gradient before the moment
    /// updates (coupled, L2-style). Parameters without a gradient are
    /// untouched and their moments do not advance.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for p in 0..params.len() {
            let Some(g) = grads.param(p) else { continue };
            let decayed = if c.weight_decay != 0.0 {
                g + &params.value(p).mapv(|w| w * c.weight_decay)
            } else {
                g.clone()
            };
            let m = &mut self.m[p];
            let v = &mut self.v[p];
            m.zip_mut_with(&decayed, |mi, gi| *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi);
            v.zip_mut_with(&decayed, |vi, gi| *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi);
            let pv = params.value_mut(p);
            ndarray::Zip::from(pv)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + c.epsilon);
                });
        }
    }
}

/// Piecewise-constant learning-rate schedule over global iterations.
/// Rates step down at fixed boundaries and hold at the final value.
pub fn learning_rate_at(iteration: u64) -> f64 {
    if iteration < 50_000 {
        1e-3
    } else if iteration < 100_000 {
        5e-4
    } else {
        3e-4
    }
}
