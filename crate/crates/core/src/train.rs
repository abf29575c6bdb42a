//! The training recipe: shuffled mini-batches, focal loss, Adam updates,
//! per-epoch validation with macro F1, and best-checkpoint retention.
//!
//! Everything is deterministic given the seed. The seed is split into
//! independent sub-streams (shuffling, dropout) so consuming one stream
//! never perturbs another.

use crate::data::{make_batches, FeatureSequence, SequenceBatch};
use crate::error::{Error, Result};
use crate::fusion::{fuse_forward, FusionModel};
use crate::loss::{focal_loss_sum, FocalLossConfig};
use crate::lr_finder::LrFinderConfig;
use crate::metrics::{macro_f1, ClassScores, ConfusionMatrix};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::RngState;
use crate::tensor::{ops, Tape};
use crate::{FEATURE_DIM, NUM_CLASSES, SEQ_LEN};
use alloc::format;
use alloc::vec::Vec;

/// Sub-stream roles derived from the run seed.
pub mod stream {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const FINDER_SHUFFLE: u64 = 3;
    pub const FINDER_DROPOUT: u64 = 4;
}

/// Complete description of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: FocalLossConfig,
    pub adam: AdamConfig,
    pub finder: LrFinderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 30,
            seed: 0,
            loss: FocalLossConfig::default(),
            adam: AdamConfig::default(),
            finder: LrFinderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.loss.validate()?;
        self.adam.validate()?;
        self.finder.validate()
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
    pub lr: f64,
}

/// Outcome of [`fit`]: the per-epoch history and the weights that scored
/// the best validation macro F1 (the initial weights when no epoch ran).
#[derive(Debug, Clone)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_model: FusionModel,
    /// Epoch (1-based) the best model comes from; `None` for zero epochs.
    pub best_epoch: Option<usize>,
}

/// Split-level evaluation: mean focal loss over scored positions, macro
/// F1, per-class scores and the raw confusion matrix.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub loss: f64,
    pub macro_f1: f64,
    pub per_class: [ClassScores; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
}

/// One optimizer step over a mini-batch. Returns the batch loss (mean over
/// the batch's scored positions) and the scored-position count.
pub(crate) fn train_step(
    model: &mut FusionModel,
    batch: &SequenceBatch,
    loss_cfg: &FocalLossConfig,
    adam: &mut AdamState,
    dropout_rng: &mut RngState,
) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true)?;
    let mut sums = Vec::with_capacity(batch.len);
    let mut scored_total = 0usize;
    for w in 0..batch.len {
        let x = tape.constant(&[SEQ_LEN, FEATURE_DIM], batch.window_features(w).to_vec())?;
        let logits = fuse_forward(&tape, &x, &bound, &model.config, true, dropout_rng)?;
        let (sum, scored) = focal_loss_sum(&tape, &logits, batch.window_labels(w), loss_cfg)?;
        sums.push(sum);
        scored_total += scored;
    }
    let mut total = sums[0].clone();
    for s in &sums[1..] {
        total = ops::add(&tape, &total, s)?;
    }
    let mean = ops::affine(&tape, &total, 1.0 / scored_total as f64, 0.0)?;
    tape.backward(&mean)?;
    let grads = bound.collect_grads();
    adam.apply(&mut model.visit_mut(), grads)?;
    Ok((mean.scalar()?, scored_total))
}

/// Evaluation-mode pass over a window list.
pub fn evaluate_windows(
    model: &FusionModel,
    windows: &[FeatureSequence],
    loss_cfg: &FocalLossConfig,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::data("cannot evaluate an empty window list"));
    }
    let mut confusion = ConfusionMatrix::new();
    let mut loss_sum = 0.0;
    let mut scored_total = 0usize;
    for w in windows {
        let logits = model.eval_logits(&w.features, SEQ_LEN)?;
        let tape = Tape::new();
        let lt = tape.constant(&[SEQ_LEN, NUM_CLASSES], logits.clone())?;
        let (sum, scored) = focal_loss_sum(&tape, &lt, &w.labels, loss_cfg)?;
        loss_sum += sum.scalar()?;
        scored_total += scored;
        let predicted = argmax_rows(&logits, SEQ_LEN);
        confusion.update(&w.labels, &predicted)?;
    }
    let (score, per_class) = macro_f1(&confusion);
    Ok(EvalReport {
        loss: loss_sum / scored_total as f64,
        macro_f1: score,
        per_class,
        confusion,
    })
}

/// Row-wise argmax with ties broken toward the lowest class index.
pub(crate) fn argmax_rows(logits: &[f64], rows: usize) -> Vec<usize> {
    let cols = NUM_CLASSES;
    (0..rows)
        .map(|r| {
            let row = &logits[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Run the full training recipe.
///
/// Each epoch trains on shuffled mini-batches and evaluates loss and macro
/// F1 on `val`. The model with the best validation macro F1 is retained
/// (strictly-greater comparison, so ties keep the earlier epoch). The
/// `on_epoch` callback sees every finished epoch; returning `false` stops
/// training early.
pub fn fit(
    model: &mut FusionModel,
    train: &[FeatureSequence],
    val: &[FeatureSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data(format!(
            "fit needs nonempty datasets, got {} train and {} val windows",
            train.len(),
            val.len()
        )));
    }
    let base = RngState::new(cfg.seed);
    let mut shuffle_rng = base.derive(stream::SHUFFLE);
    let mut dropout_rng = base.derive(stream::DROPOUT);
    let mut adam = AdamState::new(cfg.adam.clone())?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_model = model.clone();
    let mut best_epoch = None;
    let mut best_score = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        let mut loss_weighted = 0.0;
        let mut scored_total = 0usize;
        let batches = make_batches(train, cfg.batch_size, &mut shuffle_rng)?;
        for (batch_index, batch) in batches.enumerate() {
            let (loss, scored) =
                train_step(model, &batch, &cfg.loss, &mut adam, &mut dropout_rng).map_err(
                    |e| locate_error(e, epoch, batch_index),
                )?;
            loss_weighted += loss * scored as f64;
            scored_total += scored;
        }
        let val_report = evaluate_windows(model, val, &cfg.loss)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_weighted / scored_total as f64,
            val_loss: val_report.loss,
            val_macro_f1: val_report.macro_f1,
            lr: cfg.adam.learning_rate,
        };
        if val_report.macro_f1 > best_score {
            best_score = val_report.macro_f1;
            best_model = model.clone();
            best_epoch = Some(epoch);
        }
        let keep_going = on_epoch(&record);
        history.push(record);
        if !keep_going {
            break;
        }
    }
    Ok(FitResult {
        history,
        best_model,
        best_epoch,
    })
}

/// Attach epoch/batch coordinates to a step failure.
fn locate_error(e: Error, epoch: usize, batch_index: usize) -> Error {
    let tag = format!("epoch {epoch}, batch {batch_index}");
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{tag}: {m}")),
        Error::Dimension(m) => Error::Dimension(format!("{tag}: {m}")),
        Error::Config(m) => Error::Config(format!("{tag}: {m}")),
        Error::Input(m) => Error::Input(format!("{tag}: {m}")),
        Error::Contract(m) => Error::Contract(format!("{tag}: {m}")),
        Error::Data(m) => Error::Data(format!("{tag}: {m}")),
        Error::EmptyBatch(m) => Error::EmptyBatch(format!("{tag}: {m}")),
    }
}
