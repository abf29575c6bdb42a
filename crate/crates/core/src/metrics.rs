//! Per-class F1 and the macro-averaged F1 over the 8 expression classes.
//!
//! Conventions that matter for the headline number: precision, recall and
//! F1 are defined as 0 whenever their denominator is 0 (absent class), and
//! the macro average always divides by 8, absent classes included.

use crate::error::{Error, Result};
use crate::{IGNORE_LABEL, NUM_CLASSES};
use alloc::format;

/// 8x8 count matrix; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> &[[u64; NUM_CLASSES]; NUM_CLASSES] {
        &self.counts
    }

    pub fn cell(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class][predicted]
    }

    /// Number of scored (non-ignored) frames recorded so far.
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Record one aligned batch of true and predicted labels. True labels
    /// carrying the ignore sentinel are skipped.
    pub fn update(&mut self, true_labels: &[i32], predicted: &[usize]) -> Result<()> {
        if true_labels.len() != predicted.len() {
            return Err(Error::input(format!(
                "confusion update got {} true labels and {} predictions",
                true_labels.len(),
                predicted.len()
            )));
        }
        for (i, (&t, &p)) in true_labels.iter().zip(predicted).enumerate() {
            if t == IGNORE_LABEL {
                continue;
            }
            if t < 0 || t as usize >= NUM_CLASSES {
                return Err(Error::input(format!(
                    "true label {t} at position {i} is outside 0..{NUM_CLASSES}"
                )));
            }
            if p >= NUM_CLASSES {
                return Err(Error::input(format!(
                    "predicted label {p} at position {i} is outside 0..{NUM_CLASSES}"
                )));
            }
            self.counts[t as usize][p] += 1;
        }
        Ok(())
    }

    /// Cell-wise sum, for merging per-worker matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, other_row) in self.counts.iter_mut().zip(&other.counts) {
            for (cell, o) in row.iter_mut().zip(other_row) {
                *cell += o;
            }
        }
    }
}

/// Precision / recall / F1 and support of one class.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Macro F1 (unweighted mean of the 8 per-class F1 scores, divisor always
/// 8) together with the per-class scores.
pub fn macro_f1(cm: &ConfusionMatrix) -> (f64, [ClassScores; NUM_CLASSES]) {
    let mut scores = [ClassScores::default(); NUM_CLASSES];
    let mut sum = 0.0;
    for c in 0..NUM_CLASSES {
        let tp = cm.counts[c][c];
        let fp: u64 = (0..NUM_CLASSES).filter(|&t| t != c).map(|t| cm.counts[t][c]).sum();
        let fn_: u64 = (0..NUM_CLASSES).filter(|&p| p != c).map(|p| cm.counts[c][p]).sum();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        scores[c] = ClassScores {
            precision,
            recall,
            f1,
            support: tp + fn_,
        };
        sum += f1;
    }
    (sum / NUM_CLASSES as f64, scores)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn empty_update_changes_nothing() {
        let mut cm = ConfusionMatrix::new();
        cm.update(&[], &[]).unwrap();
        assert_eq!(cm.total(), 0);
        let (macro_score, _) = macro_f1(&cm);
        assert_eq!(macro_score, 0.0);
    }

    #[test]
    fn single_pair_increments_one_cell() {
        let mut cm = ConfusionMatrix::new();
        cm.update(&[3], &[3]).unwrap();
        assert_eq!(cm.cell(3, 3), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn ignored_true_labels_are_skipped() {
        let mut cm = ConfusionMatrix::new();
        cm.update(&[IGNORE_LABEL, IGNORE_LABEL], &[0, 7]).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn length_mismatch_and_bad_labels_are_input_errors() {
        let mut cm = ConfusionMatrix::new();
        assert!(matches!(cm.update(&[0], &[]), Err(Error::Input(_))));
        assert!(matches!(cm.update(&[8], &[0]), Err(Error::Input(_))));
        assert!(matches!(cm.update(&[0], &[8]), Err(Error::Input(_))));
        assert!(matches!(cm.update(&[-3], &[0]), Err(Error::Input(_))));
    }

    #[test]
    fn perfect_diagonal_scores_one() {
        let mut cm = ConfusionMatrix::new();
        for c in 0..NUM_CLASSES {
            for _ in 0..=c {
                cm.update(&[c as i32], &[c]).unwrap();
            }
        }
        let (macro_score, per_class) = macro_f1(&cm);
        assert_eq!(macro_score, 1.0);
        for s in per_class {
            assert_eq!(s.f1, 1.0);
        }
    }

    #[test]
    fn absent_classes_still_divide_by_eight() {
        let mut cm = ConfusionMatrix::new();
        for _ in 0..5 {
            cm.update(&[0], &[0]).unwrap();
            cm.update(&[1], &[1]).unwrap();
        }
        let (macro_score, per_class) = macro_f1(&cm);
        assert_eq!(macro_score, 2.0 / 8.0);
        assert_eq!(per_class[0].f1, 1.0);
        assert_eq!(per_class[1].f1, 1.0);
        for s in &per_class[2..] {
            assert_eq!(s.f1, 0.0);
            assert_eq!(s.support, 0);
        }
    }

    #[test]
    fn hand_counted_matrix() {
        // class 0: tp=2 fp=1 fn=1 -> f1 = 2/3; class 1: tp=1 fp=1 fn=2 ->
        // f1 = 0.4; everything else absent.
        let mut cm = ConfusionMatrix::new();
        cm.update(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 0, 2]).unwrap();
        let (macro_score, per_class) = macro_f1(&cm);
        assert!((per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((per_class[1].f1 - 0.4).abs() < 1e-15);
        assert!((macro_score - (2.0 / 3.0 + 0.4) / 8.0).abs() < 1e-15);
        assert!((macro_score - 0.13333).abs() < 1e-5);
    }

    /// Independent one-vs-rest scorer working directly on label pairs.
    pub(crate) fn brute_force_macro_f1(pairs: &[(usize, usize)]) -> f64 {
        let mut sum = 0.0;
        for c in 0..NUM_CLASSES {
            let tp = pairs.iter().filter(|(t, p)| *t == c && *p == c).count() as f64;
            let fp = pairs.iter().filter(|(t, p)| *t != c && *p == c).count() as f64;
            let fn_ = pairs.iter().filter(|(t, p)| *t == c && *p != c).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            if precision + recall > 0.0 {
                sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        sum / NUM_CLASSES as f64
    }

    #[test]
    fn agrees_with_brute_force_on_random_streams() {
        let mut rng = crate::rng::RngState::new(123);
        for _ in 0..50 {
            let n = 1 + (rng.next_f64() * 200.0) as usize;
            let pairs: Vec<(usize, usize)> = (0..n)
                .map(|_| {
                    (
                        (rng.next_f64() * 8.0) as usize,
                        (rng.next_f64() * 8.0) as usize,
                    )
                })
                .collect();
            let mut cm = ConfusionMatrix::new();
            for (t, p) in &pairs {
                cm.update(&[*t as i32], &[*p]).unwrap();
            }
            let (macro_score, _) = macro_f1(&cm);
            let want = brute_force_macro_f1(&pairs);
            assert_eq!(macro_score, want);
        }
    }

    proptest! {
        #[test]
        fn macro_f1_invariant_under_class_relabeling(
            pairs in proptest::collection::vec((0usize..8, 0usize..8), 1..100),
            shift in 1usize..8,
        ) {
            // Rotation is a permutation of class labels.
            let mut cm = ConfusionMatrix::new();
            let mut relabeled = ConfusionMatrix::new();
            for (t, p) in &pairs {
                cm.update(&[*t as i32], &[*p]).unwrap();
                relabeled
                    .update(&[((t + shift) % 8) as i32], &[(p + shift) % 8])
                    .unwrap();
            }
            let (a, _) = macro_f1(&cm);
            let (b, _) = macro_f1(&relabeled);
            prop_assert!((a - b).abs() < 1e-15);
        }

        #[test]
        fn merging_matrices_equals_concatenating_streams(
            first in proptest::collection::vec((0usize..8, 0usize..8), 0..60),
            second in proptest::collection::vec((0usize..8, 0usize..8), 0..60),
        ) {
            let mut a = ConfusionMatrix::new();
            for (t, p) in &first {
                a.update(&[*t as i32], &[*p]).unwrap();
            }
            let mut b = ConfusionMatrix::new();
            for (t, p) in &second {
                b.update(&[*t as i32], &[*p]).unwrap();
            }
            a.merge(&b);

            let mut combined = ConfusionMatrix::new();
            for (t, p) in first.iter().chain(&second) {
                combined.update(&[*t as i32], &[*p]).unwrap();
            }
            prop_assert_eq!(a, combined);
        }

        #[test]
        fn scores_stay_in_unit_interval(
            pairs in proptest::collection::vec((0usize..8, 0usize..8), 0..100),
        ) {
            let mut cm = ConfusionMatrix::new();
            for (t, p) in &pairs {
                cm.update(&[*t as i32], &[*p]).unwrap();
            }
            let (macro_score, per_class) = macro_f1(&cm);
            prop_assert!((0.0..=1.0).contains(&macro_score));
            let mean: f64 = per_class.iter().map(|s| s.f1).sum::<f64>() / 8.0;
            prop_assert!((macro_score - mean).abs() < 1e-15);
            for s in per_class {
                prop_assert!((0.0..=1.0).contains(&s.f1));
                prop_assert!((0.0..=1.0).contains(&s.precision));
                prop_assert!((0.0..=1.0).contains(&s.recall));
            }
        }
    }
}
