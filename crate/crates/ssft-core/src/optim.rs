//! AdamW with decoupled weight decay, the step-decay schedule, and early
//! stopping on the validation metric.

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;
use indexmap::IndexMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Norm affines and biases are excluded from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

pub struct AdamW {
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, tensor) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(tensor.shape()));
            v.insert(name.clone(), Tensor::zeros(tensor.shape()));
        }
        AdamW { m, v, t: 0 }
    }

    /// One decoupled-decay update: `theta -= lr * m_hat / (sqrt(v_hat) + eps)
    /// + lr * wd * theta`. Tensors with no gradient take a zero gradient.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
        wd: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, theta) in params.iter_mut() {
            if let Some(g) = grads.get(name) {
                if g.shape() != theta.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient for {} has shape {:?}, parameter {:?}",
                        name,
                        g.shape(),
                        theta.shape()
                    )));
                }
            }
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            let decay = if decays(name) { wd } else { 0.0 };
            let zero = [];
            let gdata: &[f64] = grads.get(name).map(|g| g.data()).unwrap_or(&zero);
            for i in 0..theta.numel() {
                let gi = gdata.get(i).copied().unwrap_or(0.0);
                let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
                let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let th = &mut theta.data_mut()[i];
                *th -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS)) + lr * decay * *th;
            }
        }
        Ok(())
    }
}

/// Step decay: `lr0 * gamma^floor((epoch - 1) / step_size)` for epoch >= 1.
pub fn lr_at(epoch: usize, lr0: f64, step_size: usize, gamma: f64) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    lr0 * gamma.powi(((epoch - 1) / step_size) as i32)
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Record the metric for `epoch`; returns true when training should stop.
    /// Ties do not count as improvement.
    pub fn update(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn improved(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_metric(&self) -> f64 {
        self.best
    }
}
