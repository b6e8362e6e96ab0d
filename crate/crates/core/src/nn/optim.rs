use serde::{Deserialize, Serialize};

use super::{ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cosine interpolation from `start` at step 0 to `end` at step `total_steps - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.start;
        }
        let last = (self.total_steps - 1) as f64;
        let t = step.min(self.total_steps - 1) as f64 / last;
        self.end + 0.5 * (self.start - self.end) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < end <= start, got {} -> {}",
                self.lr_start, self.lr_end
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    pub fn schedule(&self, total_steps: usize) -> CosineSchedule {
        CosineSchedule {
            start: self.lr_start,
            end: self.lr_end,
            total_steps,
        }
    }
}

/// One momentum SGD update: `v ← μ·v + g`, `p ← p − lr·v`. A zero rate is a no-op.
pub fn sgd_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    if lr == 0.0 {
        return;
    }
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

/// Per-parameter optimizer state over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    slots: Vec<Option<Slot>>,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    /// `momentum` is the SGD momentum, or Adam's first-moment decay.
    pub fn new(kind: OptimizerKind, momentum: f64, n_params: usize) -> Self {
        Optimizer {
            kind,
            momentum,
            slots: vec![None; n_params],
        }
    }

    /// Applies one update to every parameter that has a gradient, at its group's rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: impl Fn(ParamGroup) -> f64) {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.group)).collect();
        for (id, group) in ids {
            let Some(grad) = &grads[id.index()] else { continue };
            let rate = lr(group);
            if rate == 0.0 {
                continue;
            }
            let param = store.value_mut(id).data_mut();
            let slot = self.slots[id.index()].get_or_insert_with(|| Slot {
                first: vec![0.0; param.len()],
                second: vec![0.0; param.len()],
                steps: 0,
            });
            match self.kind {
                OptimizerKind::Sgd => sgd_step(param, &mut slot.first, grad.data(), rate, self.momentum),
                OptimizerKind::Adam => {
                    slot.steps += 1;
                    let b1 = self.momentum;
                    let c1 = 1.0 - b1.powi(slot.steps);
                    let c2 = 1.0 - ADAM_BETA2.powi(slot.steps);
                    for (j, g) in grad.data().iter().enumerate() {
                        slot.first[j] = b1 * slot.first[j] + (1.0 - b1) * g;
                        slot.second[j] = ADAM_BETA2 * slot.second[j] + (1.0 - ADAM_BETA2) * g * g;
                        let m = slot.first[j] / c1;
                        let v = slot.second[j] / c2;
                        param[j] -= rate * m / (v.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
