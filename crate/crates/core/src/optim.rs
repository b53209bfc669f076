//! Adam with L2 weight decay, and the cosine one-cycle learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Parameter, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Decay enters as `g + lambda * theta`
/// unless the parameter is decay-exempt.
pub fn adam_step<T: Real>(
    param: &mut Parameter<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let decay = if param.weight_decay_exempt() { 0.0 } else { weight_decay };
    let name = param.name.clone();
    let (values, grad) = param.tensor.parts_mut();
    let grad = grad.ok_or_else(|| Error::Optimizer(format!("parameter {name} has no gradient")))?;
    if state.m.len() != values.len() || state.v.len() != values.len() {
        return Err(Error::Optimizer(format!(
            "optimizer state for {name} has {} entries, parameter has {}",
            state.m.len(),
            values.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let step_size = T::from_f64(lr / (1.0 - BETA1.powi(t)));
    let correction2 = T::from_f64(1.0 / (1.0 - BETA2.powi(t)));
    let (decay, eps) = (T::from_f64(decay), T::from_f64(EPSILON));
    for i in 0..values.len() {
        let g = grad[i] + decay * values[i];
        state.m[i] = b1 * state.m[i] + c1 * g;
        state.v[i] = b2 * state.v[i] + c2 * g * g;
        let denom = (state.v[i] * correction2).sqrt() + eps;
        values[i] -= step_size * state.m[i] / denom;
    }
    Ok(())
}

/// Adam over every trainable parameter of a module, in visit order.
#[derive(Debug, Clone, Default)]
pub struct Adam<T> {
    pub states: Vec<(String, AdamState<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn for_module<M: Module<T> + ?Sized>(module: &M) -> Self {
        let mut states = Vec::new();
        module.visit(&mut |p| {
            if p.trainable() {
                states.push((p.name.clone(), AdamState::new(p.tensor.len())));
            }
        });
        Adam { states }
    }

    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64, weight_decay: f64) -> Result<()> {
        let mut states = self.states.iter_mut();
        let mut result = Ok(());
        module.visit_mut(&mut |p| {
            if !p.trainable() || result.is_err() {
                return;
            }
            result = match states.next() {
                Some((name, state)) if *name == p.name => adam_step(p, state, lr, weight_decay),
                _ => Err(Error::Optimizer(format!("no optimizer state for {}", p.name))),
            };
        });
        result
    }
}

/// Cosine warm-up to `max_lr` over the first `pct_up` of the steps, then cosine
/// annealing to `max_lr / (div_factor * final_div_factor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_up: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        OneCycleSchedule {
            max_lr,
            total_steps,
            pct_up: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pct_up > 0.0 && self.pct_up < 1.0) {
            return Err(Error::Schedule(format!("pct_up {} outside (0, 1)", self.pct_up)));
        }
        if self.div_factor <= 1.0 || self.final_div_factor <= 1.0 {
            return Err(Error::Schedule("div factors must exceed 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Schedule("total_steps is zero".into()));
        }
        if !(self.max_lr >= 0.0) {
            return Err(Error::Schedule(format!("max_lr {} is negative", self.max_lr)));
        }
        Ok(())
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.initial_lr() / self.final_div_factor
    }

    pub fn peak_step(&self) -> f64 {
        self.pct_up * self.total_steps as f64
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::Schedule(format!(
                "step {step} beyond total {}",
                self.total_steps
            )));
        }
        let cos = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (PI * frac).cos());
        let (s, up) = (step as f64, self.peak_step());
        Ok(if s <= up {
            cos(self.initial_lr(), self.max_lr, s / up)
        } else {
            let down = self.total_steps as f64 - up;
            cos(self.max_lr, self.final_lr(), (s - up) / down)
        })
    }
}
