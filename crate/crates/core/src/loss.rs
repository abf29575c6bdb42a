//! Focal loss over the 8 expression classes.
//!
//! `loss = mean over non-ignored positions of -w_y * (1 - p_y)^gamma * log(p_y)`
//! with `p = softmax(logits)` and `y` the true class, computed through
//! log-softmax for numerical stability. `gamma = 0` with unit weights
//! reduces exactly to cross-entropy. Positions carrying the ignore label
//! contribute neither loss nor gradient.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tape, Tensor};
use crate::{IGNORE_LABEL, NUM_CLASSES};
use alloc::format;
use alloc::vec;

/// Focusing and weighting constants of the focal loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalLossConfig {
    /// Focusing exponent; 0 recovers cross-entropy.
    pub gamma: f64,
    /// Per-class multiplier applied to each position's term.
    pub class_weights: [f64; NUM_CLASSES],
    /// Sentinel label excluded from the loss.
    pub ignore_index: i32,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig {
            gamma: 2.0,
            class_weights: [1.0; NUM_CLASSES],
            ignore_index: IGNORE_LABEL,
        }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::config(format!(
                "focal gamma must be a nonnegative finite value, got {}",
                self.gamma
            )));
        }
        if self
            .class_weights
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::config(
                "focal class weights must be nonnegative finite values",
            ));
        }
        Ok(())
    }
}

/// Focal loss summed over non-ignored positions, plus the count of scored
/// positions. Batch loops combine several of these into one weighted mean.
pub fn focal_loss_sum(
    tape: &Tape,
    logits: &Tensor,
    labels: &[i32],
    cfg: &FocalLossConfig,
) -> Result<(Tensor, usize)> {
    cfg.validate()?;
    let [positions, classes] = logits.shape() else {
        return Err(Error::dim(format!(
            "focal loss expects [positions, classes] logits, got {:?}",
            logits.shape()
        )));
    };
    if *classes != NUM_CLASSES {
        return Err(Error::dim(format!(
            "focal loss expects {NUM_CLASSES} classes, got {classes}"
        )));
    }
    if labels.len() != *positions {
        return Err(Error::input(format!(
            "focal loss got {} labels for {positions} positions",
            labels.len()
        )));
    }
    // Constant selection mask: w_y at the true-class column of every scored
    // position, zero elsewhere.
    let mut mask = vec![0.0; positions * classes];
    let mut scored = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if label == cfg.ignore_index {
            continue;
        }
        if label < 0 || label as usize >= NUM_CLASSES {
            return Err(Error::input(format!(
                "label {label} at position {i} is outside 0..{NUM_CLASSES}"
            )));
        }
        mask[i * classes + label as usize] = cfg.class_weights[label as usize];
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::EmptyBatch(
            "every position carries the ignore label".into(),
        ));
    }
    let mask = tape.constant(&[*positions, *classes], mask)?;
    let logp = ops::log_softmax_last(tape, logits)?;
    let p = ops::exp(tape, &logp)?;
    let one_minus_p = ops::affine(tape, &p, -1.0, 1.0)?;
    let focal = ops::pow_const(tape, &one_minus_p, cfg.gamma)?;
    let neg_logp = ops::affine(tape, &logp, -1.0, 0.0)?;
    let term = ops::hadamard(tape, &ops::hadamard(tape, &mask, &focal)?, &neg_logp)?;
    Ok((ops::sum_all(tape, &term)?, scored))
}

/// Mean focal loss over the non-ignored positions of one sequence.
pub fn focal_loss(
    tape: &Tape,
    logits: &Tensor,
    labels: &[i32],
    cfg: &FocalLossConfig,
) -> Result<Tensor> {
    let (sum, scored) = focal_loss_sum(tape, logits, labels, cfg)?;
    ops::affine(tape, &sum, 1.0 / scored as f64, 0.0)
}
