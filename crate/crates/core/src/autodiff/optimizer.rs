//! SGD with classical momentum and a cosine-annealed learning rate.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Cosine annealing from `base_lr` at step 0 down to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("cosine_lr: total_steps must be > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr: step {step} exceeds total_steps {total_steps}"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}

/// Per-parameter velocity buffers plus the schedule position.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    momentum: f64,
    base_lr: f64,
    step: usize,
    total_steps: usize,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(momentum: f64, base_lr: f64, total_steps: usize) -> Self {
        Self {
            momentum,
            base_lr,
            step: 0,
            total_steps,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Learning rate the next `sgd_step` call will apply.
    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.step, self.total_steps, self.base_lr)
    }
}

/// One momentum update: `v ← μ·v + g`, `p ← p − lr·v`.
///
/// All gradients are validated for finiteness before any parameter is
/// touched, so a non-finite gradient aborts the step with no partial update.
pub fn sgd_step(
    params: Vec<(&str, &mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<()> {
    let lr = state.current_lr()?;
    for (name, p) in &params {
        let g = grads.get(*name).ok_or_else(|| {
            Error::Contract(format!("sgd_step: no gradient for parameter '{name}'"))
        })?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "sgd_step: gradient shape {:?} vs parameter shape {:?} for '{name}'",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!(
                "sgd_step: non-finite gradient for '{name}'; step aborted"
            )));
        }
    }
    let mu = state.momentum;
    for (name, p) in params {
        let g = &grads[name];
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; p.numel()]);
        if v.len() != p.numel() {
            return Err(Error::Shape(format!(
                "sgd_step: velocity of {} elements for parameter '{name}' of {}",
                v.len(),
                p.numel()
            )));
        }
        for ((vi, pi), gi) in v.iter_mut().zip(p.data_mut()).zip(g.data()) {
            *vi = mu * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}
