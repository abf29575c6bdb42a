//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::fmath;
use crate::param::Param;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Adam hyperparameters. The learning rate has no canonical value in the
/// training recipe (it is meant to come from the LR range test); 1e-3 is
/// the customary fallback default.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// First/second moment buffers and the step counter, one pair per
/// parameter block, in the model's canonical visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamState {
            cfg,
            step: 0,
            moments: Vec::new(),
        })
    }

    /// Number of update steps applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over named parameter blocks.
    ///
    /// `grads` must align one-to-one with `params` (the trainer collects
    /// them from the same visit that produced the blocks). A missing
    /// gradient is a contract error; a non-finite one is a numeric error
    /// naming the block. Gradient buffers are consumed by the call.
    pub fn apply(
        &mut self,
        params: &mut [(String, &mut Param)],
        grads: Vec<Option<Vec<f64>>>,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam received {} gradient blocks for {} parameter blocks",
                grads.len(),
                params.len()
            )));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, p)| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::contract(format!(
                "adam state tracks {} blocks, update got {}",
                self.moments.len(),
                params.len()
            )));
        }
        // Validate everything before mutating any parameter.
        for ((name, p), grad) in params.iter().zip(&grads) {
            let Some(g) = grad else {
                return Err(Error::contract(format!(
                    "parameter block {name} has no gradient"
                )));
            };
            if g.len() != p.numel() {
                return Err(Error::contract(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            if let Some(idx) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient in parameter block {name} at index {idx}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let m_corr = 1.0 / (1.0 - libm::pow(c.beta1, t as f64));
        let v_corr = 1.0 / (1.0 - libm::pow(c.beta2, t as f64));
        for (((_, p), grad), mom) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let g = grad.expect("validated above");
            for i in 0..p.numel() {
                let gi = g[i];
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = mom.m[i] * m_corr;
                let v_hat = mom.v[i] * v_corr;
                p.values[i] -= c.learning_rate * m_hat / (fmath::sqrt(v_hat) + c.epsilon);
            }
            if let Some(idx) = p.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "parameter became non-finite at index {idx} after an adam step"
                )));
            }
        }
        Ok(())
    }
}

/// Free-function form of one optimizer step.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [(String, &mut Param)],
    grads: Vec<Option<Vec<f64>>>,
) -> Result<()> {
    state.apply(params, grads)
}
