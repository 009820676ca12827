//! Adam with bias correction and learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{AtcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr(t) = base * 0.5 * (1 + cos(pi t / total))`; exactly 0 at `total`.
    Cosine { total_steps: usize },
    /// `lr(t) = base * (1 - t / total)`, clamped at 0.
    Linear { total_steps: usize },
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    first_moment: Vec<f32>,
    second_moment: Vec<f32>,
}

/// Optimizer state across all registered parameters.
///
/// `step_count` advances exactly once per [`Adam::begin_step`]; every
/// parameter updated under the returned tick shares that step's learning
/// rate and bias corrections. Moment arrays are f32 like the parameters;
/// the update arithmetic runs in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub schedule: LrSchedule,
    step_count: usize,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(base_lr: f64, schedule: LrSchedule) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr,
            schedule,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.epsilon = epsilon;
        self
    }

    /// Register a parameter; returns the slot index to pass to `apply`.
    pub fn register(&mut self, name: &str, numel: usize) -> usize {
        self.slots.push(Slot {
            name: name.to_string(),
            first_moment: vec![0.0; numel],
            second_moment: vec![0.0; numel],
        });
        self.slots.len() - 1
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Schedule value for a 0-based step index.
    pub fn effective_lr(&self, step: usize) -> f64 {
        let lr = match self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::Cosine { total_steps } => {
                if step >= total_steps {
                    0.0
                } else {
                    self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
                }
            }
            LrSchedule::Linear { total_steps } => {
                if step >= total_steps {
                    0.0
                } else {
                    self.base_lr * (1.0 - step as f64 / total_steps as f64)
                }
            }
        };
        lr.max(0.0)
    }

    /// Start one optimization step: increments the step counter and fixes
    /// the learning rate and bias corrections used by every `apply` call
    /// made through the tick.
    pub fn begin_step(&mut self) -> AdamTick<'_> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.effective_lr(self.step_count - 1);
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        AdamTick { adam: self, lr, bc1, bc2 }
    }
}

pub struct AdamTick<'a> {
    adam: &'a mut Adam,
    lr: f64,
    bc1: f64,
    bc2: f64,
}

impl AdamTick<'_> {
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one bias-corrected update to a parameter from its gradient.
    pub fn apply(&mut self, slot: usize, param: &mut Tensor, grad: &[f32]) -> Result<()> {
        let s = &mut self.adam.slots[slot];
        if grad.len() != param.numel() || s.first_moment.len() != grad.len() {
            return Err(AtcError::config(format!(
                "adam slot {} ({}): parameter/gradient/moment sizes disagree",
                slot, s.name
            )));
        }
        if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
            return Err(AtcError::NonFinite(format!(
                "gradient of {} has non-finite entry at {} = {}",
                s.name, bad, grad[bad]
            )));
        }
        let b1 = self.adam.beta1;
        let b2 = self.adam.beta2;
        let eps = self.adam.epsilon;
        let lr = self.lr;
        let (bc1, bc2) = (self.bc1, self.bc2);
        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(s.first_moment.iter_mut().zip(s.second_moment.iter_mut()))
        {
            let gd = *g as f64;
            let md = b1 * *m as f64 + (1.0 - b1) * gd;
            let vd = b2 * *v as f64 + (1.0 - b2) * gd * gd;
            *m = md as f32;
            *v = vd as f32;
            let mhat = *m as f64 / bc1;
            let vhat = *v as f64 / bc2;
            *p = (*p as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = Adam::new(1e-3, LrSchedule::Constant);
        let slot = adam.register("w", 3);
        let mut p = Tensor::param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.data().to_vec();
        for _ in 0..10 {
            let mut tick = adam.begin_step();
            tick.apply(slot, &mut p, &[0.0, 0.0, 0.0]).unwrap();
        }
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes mhat = vhat = 1 on the first step for g = 1
        let mut adam = Adam::new(1e-3, LrSchedule::Constant);
        let slot = adam.register("w", 1);
        let mut p = Tensor::param(vec![1], vec![0.0]).unwrap();
        let mut tick = adam.begin_step();
        tick.apply(slot, &mut p, &[1.0]).unwrap();
        assert!((p.data()[0] as f64 + 1e-3).abs() < 1e-10, "got {}", p.data()[0]);
    }

    #[test]
    fn cosine_hits_zero_at_total_and_stays_nonnegative() {
        let adam = Adam::new(1e-3, LrSchedule::Cosine { total_steps: 100 });
        assert_eq!(adam.effective_lr(0), 1e-3);
        assert_eq!(adam.effective_lr(100), 0.0);
        assert_eq!(adam.effective_lr(250), 0.0);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = adam.effective_lr(s);
            assert!(lr >= 0.0 && lr <= prev);
            prev = lr;
        }
        // midpoint of the cosine
        assert!((adam.effective_lr(50) - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut adam = Adam::new(1e-3, LrSchedule::Constant);
        let slot = adam.register("w", 1);
        let mut p = Tensor::param(vec![1], vec![0.0]).unwrap();
        let mut tick = adam.begin_step();
        assert!(matches!(tick.apply(slot, &mut p, &[f32::NAN]), Err(AtcError::NonFinite(_))));
    }
}
