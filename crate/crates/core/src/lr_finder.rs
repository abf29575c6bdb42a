//! Learning-rate range test.
//!
//! One sweep of geometrically increasing learning rates, one optimizer
//! step per rate, recording an exponentially smoothed loss curve. The
//! suggested rate is the one at the steepest negative slope of the
//! smoothed curve, divided by 10. The model is snapshotted before the
//! sweep and restored bit-for-bit afterwards; the sweep's optimizer state
//! is discarded.

use crate::data::{make_batches, FeatureSequence};
use crate::error::{Error, Result};
use crate::fmath;
use crate::fusion::FusionModel;
use crate::optim::AdamState;
use crate::rng::RngState;
use crate::train::{stream, train_step, TrainConfig};
use alloc::format;
use alloc::vec::Vec;

/// Range-test settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LrFinderConfig {
    pub min_lr: f64,
    pub max_lr: f64,
    pub num_steps: usize,
    /// Weight of the newest loss in the exponential smoothing (bias-
    /// corrected).
    pub smoothing: f64,
    /// Stop early once the smoothed loss exceeds this multiple of the best
    /// smoothed loss seen so far.
    pub divergence_factor: f64,
}

impl Default for LrFinderConfig {
    fn default() -> Self {
        LrFinderConfig {
            min_lr: 1e-7,
            max_lr: 1.0,
            num_steps: 100,
            smoothing: 0.05,
            divergence_factor: 4.0,
        }
    }
}

impl LrFinderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0) || !(self.max_lr > self.min_lr) || !self.max_lr.is_finite() {
            return Err(Error::config(format!(
                "lr range must satisfy 0 < min < max, got [{}, {}]",
                self.min_lr, self.max_lr
            )));
        }
        if self.num_steps < 10 {
            return Err(Error::config(format!(
                "lr range test needs at least 10 steps, got {}",
                self.num_steps
            )));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::config(format!(
                "smoothing factor must lie in (0, 1], got {}",
                self.smoothing
            )));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::config(format!(
                "divergence factor must exceed 1, got {}",
                self.divergence_factor
            )));
        }
        Ok(())
    }

    /// The exact geometric schedule:
    /// `lr_i = min_lr * (max_lr / min_lr)^(i / (num_steps - 1))`.
    pub fn schedule(&self) -> Vec<f64> {
        let ratio = self.max_lr / self.min_lr;
        (0..self.num_steps)
            .map(|i| self.min_lr * fmath::powf(ratio, i as f64 / (self.num_steps - 1) as f64))
            .collect()
    }
}

/// Outcome of the range test.
#[derive(Debug, Clone, PartialEq)]
pub struct LrFindResult {
    pub suggested_lr: f64,
    /// `(lr, smoothed_loss)` per executed step; at most `num_steps` rows,
    /// fewer when the divergence stop fires.
    pub curve: Vec<(f64, f64)>,
}

/// Sweep the learning rate geometrically over fresh mini-batches.
///
/// The data must supply at least `num_steps` batches in one pass. On
/// return the model is bit-identical to its pre-test state.
pub fn lr_range_test(
    model: &mut FusionModel,
    windows: &[FeatureSequence],
    cfg: &TrainConfig,
) -> Result<LrFindResult> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::data("lr range test needs a nonempty dataset"));
    }
    let finder = &cfg.finder;
    let available = windows.len().div_ceil(cfg.batch_size);
    if available < finder.num_steps {
        return Err(Error::data(format!(
            "lr range test needs {} batches but the data yields only {available} \
             ({} windows at batch size {})",
            finder.num_steps,
            windows.len(),
            cfg.batch_size
        )));
    }

    let snapshot = model.clone();
    let base = RngState::new(cfg.seed);
    let mut shuffle_rng = base.derive(stream::FINDER_SHUFFLE);
    let mut dropout_rng = base.derive(stream::FINDER_DROPOUT);
    let mut adam = AdamState::new(cfg.adam.clone())?;

    let schedule = finder.schedule();
    let mut batches = make_batches(windows, cfg.batch_size, &mut shuffle_rng)?;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(finder.num_steps);
    let mut raw = 0.0;
    let mut best = f64::INFINITY;
    for (i, &lr) in schedule.iter().enumerate() {
        let batch = batches.next().expect("batch count checked above");
        adam.cfg.learning_rate = lr;
        let step = train_step(model, &batch, &cfg.loss, &mut adam, &mut dropout_rng);
        let loss = match step {
            Ok((loss, _)) => loss,
            Err(e) => {
                *model = snapshot;
                return Err(if i == 0 {
                    Error::numeric(format!("loss is not finite at min_lr {lr}: {e}"))
                } else {
                    e
                });
            }
        };
        raw = (1.0 - finder.smoothing) * raw + finder.smoothing * loss;
        let corrected = raw / (1.0 - fmath::powf(1.0 - finder.smoothing, (i + 1) as f64));
        curve.push((lr, corrected));
        best = best.min(corrected);
        if corrected > finder.divergence_factor * best {
            break;
        }
    }
    *model = snapshot;

    // Steepest negative slope of the smoothed curve; if the loss never
    // decreased, fall back to the curve minimum.
    let mut steepest_idx = None;
    let mut steepest = 0.0;
    for i in 1..curve.len() {
        let slope = curve[i].1 - curve[i - 1].1;
        if slope < steepest {
            steepest = slope;
            steepest_idx = Some(i);
        }
    }
    let at = steepest_idx.unwrap_or_else(|| {
        let mut best_i = 0;
        for (i, point) in curve.iter().enumerate() {
            if point.1 < curve[best_i].1 {
                best_i = i;
            }
        }
        best_i
    });
    Ok(LrFindResult {
        suggested_lr: curve[at].0 / 10.0,
        curve,
    })
}
